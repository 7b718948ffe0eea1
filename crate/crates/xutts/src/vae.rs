//! The conditional VAE core: utterance-specific prior, reference-mel
//! posterior, the residual sampling chain, and the two-KL training
//! objective.
//!
//! Latents are 2-dimensional per phoneme. The posterior statistics
//! describe a residual on top of the prior: sampling composes
//! `z_p = mu_p + sigma_p * eps` and `z = mu + sigma * z_p`, so the
//! distribution of `z` given the context is
//! `N(mu + sigma*mu_p, (sigma*sigma_p)^2)` and both KL terms are
//! closed-form diagonal Gaussians.

use rand::Rng;

use tapegrad::nn::{Conv1d, HasParams};
use tapegrad::{Matrix, Tape, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 2;

/// Per-phoneme latent statistics and draws.
#[derive(Debug, Clone)]
pub struct LatentBundle {
    pub mu: Matrix,
    pub sigma: Matrix,
    pub mu_p: Matrix,
    pub sigma_p: Matrix,
    pub z_p: Matrix,
    pub z: Matrix,
}

/// Loss components with the sign convention "loss to minimize".
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl_posterior_prior: f64,
    pub kl_prior_standard: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub total: f64,
}

/// Prior and posterior heads (two kernel-1 conv layers each).
pub struct CucVae {
    pub prior_conv1: Conv1d,
    pub prior_conv2: Conv1d,
    pub post_conv1: Conv1d,
    pub post_conv2: Conv1d,
    /// Ablation: emit a fixed N(0, 1) prior instead of the learned one.
    pub standard_prior: bool,
    pub n_mels: usize,
}

impl CucVae {
    pub fn new<R: Rng>(cfg: &ModelConfig, n_mels: usize, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            prior_conv1: Conv1d::new("vae.prior.conv1", d, d, 1, rng),
            prior_conv2: Conv1d::new("vae.prior.conv2", d, 2 * LATENT_DIM, 1, rng),
            post_conv1: Conv1d::new("vae.post.conv1", n_mels, d, 1, rng),
            post_conv2: Conv1d::new("vae.post.conv2", d, 2 * LATENT_DIM, 1, rng),
            standard_prior: cfg.standard_prior,
            n_mels,
        }
    }

    /// Utterance-specific prior from the embedding output:
    /// `(mu_p, log sigma_p)`, each `[T x 2]`.
    pub fn prior(&self, t: &mut Tape, h: Var) -> (Var, Var) {
        let rows = t.value(h).nrows();
        if self.standard_prior {
            let mu_p = t.constant(Matrix::zeros((rows, LATENT_DIM)));
            let lsp = t.constant(Matrix::zeros((rows, LATENT_DIM)));
            return (mu_p, lsp);
        }
        let x = self.prior_conv1.forward(t, h);
        let x = t.relu(x);
        let x = self.prior_conv2.forward(t, x);
        let mu_p = t.slice_cols(x, 0, LATENT_DIM);
        let lsp = t.slice_cols(x, LATENT_DIM, 2 * LATENT_DIM);
        (mu_p, lsp)
    }

    /// Posterior heads over already-pooled per-phoneme mel vectors.
    pub fn posterior_from_pooled(&self, t: &mut Tape, pooled: Var) -> (Var, Var) {
        let x = self.post_conv1.forward(t, pooled);
        let x = t.relu(x);
        let x = self.post_conv2.forward(t, x);
        let mu = t.slice_cols(x, 0, LATENT_DIM);
        let ls = t.slice_cols(x, LATENT_DIM, 2 * LATENT_DIM);
        (mu, ls)
    }

    /// Posterior `(mu, log sigma)` from a reference mel: frames are
    /// mean-pooled within each phoneme's span (duration-0 phonemes pool to
    /// the zero vector) before the conv heads.
    pub fn posterior_from_mel(&self, t: &mut Tape, mel: &Matrix,
                              durations: &[usize]) -> Result<(Var, Var)> {
        let total: usize = durations.iter().sum();
        if total != mel.nrows() {
            return Err(Error::Shape(format!(
                "durations cover {total} frames but the mel has {}",
                mel.nrows()
            )));
        }
        if mel.ncols() != self.n_mels {
            return Err(Error::Shape(format!(
                "mel has {} bands, posterior expects {}",
                mel.ncols(),
                self.n_mels
            )));
        }
        let spans = spans_from_durations(durations);
        let mel_v = t.constant(mel.clone());
        let pooled = t.segment_mean(mel_v, &spans);
        Ok(self.posterior_from_pooled(t, pooled))
    }
}

impl HasParams for CucVae {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.prior_conv1.visit(f);
        self.prior_conv2.visit(f);
        self.post_conv1.visit(f);
        self.post_conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.prior_conv1.visit_mut(f);
        self.prior_conv2.visit_mut(f);
        self.post_conv1.visit_mut(f);
        self.post_conv2.visit_mut(f);
    }
}

/// Frame spans per phoneme from durations.
pub fn spans_from_durations(durations: &[usize]) -> Vec<(usize, usize)> {
    let mut spans = Vec::with_capacity(durations.len());
    let mut cursor = 0;
    for &d in durations {
        spans.push((cursor, cursor + d));
        cursor += d;
    }
    spans
}

/// Mean-pool mel frames per phoneme (plain-data version of the posterior
/// pooling; duration-0 phonemes give zero rows).
pub fn pool_frames(mel: &Matrix, durations: &[usize]) -> Result<Matrix> {
    let total: usize = durations.iter().sum();
    if total != mel.nrows() {
        return Err(Error::Shape(format!(
            "durations cover {total} frames but the mel has {}",
            mel.nrows()
        )));
    }
    let mut out = Matrix::zeros((durations.len(), mel.ncols()));
    for (p, &(a, b)) in spans_from_durations(durations).iter().enumerate() {
        if a == b {
            continue;
        }
        let inv = 1.0 / (b - a) as f64;
        for j in 0..mel.ncols() {
            let mut acc = 0.0;
            for i in a..b {
                acc += mel[(i, j)];
            }
            out[(p, j)] = acc * inv;
        }
    }
    Ok(out)
}

fn check_same_shape(name: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{name}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Two-step reparameterized draw:
/// `z_p = mu_p + sigma_p * eps`, then `z = mu + sigma * z_p`.
/// The composed closed form `z = mu + sigma*mu_p + sigma*sigma_p*eps` is
/// verified elementwise before returning.
pub fn sample_latent(mu: &Matrix, sigma: &Matrix, mu_p: &Matrix, sigma_p: &Matrix,
                     eps: &Matrix) -> Result<LatentBundle> {
    check_same_shape("mu/sigma", mu, sigma)?;
    check_same_shape("mu/mu_p", mu, mu_p)?;
    check_same_shape("mu/sigma_p", mu, sigma_p)?;
    check_same_shape("mu/eps", mu, eps)?;
    if sigma.iter().any(|&s| s <= 0.0) || sigma_p.iter().any(|&s| s <= 0.0) {
        return Err(Error::Validation("sigma values must be positive".into()));
    }
    let z_p = mu_p + &(sigma_p * eps);
    let z = mu + &(sigma * &z_p);
    let direct = mu + &(sigma * mu_p) + &(sigma * sigma_p * eps);
    let max_gap = z
        .iter()
        .zip(direct.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    if max_gap > 1e-12 {
        return Err(Error::Validation(format!(
            "sampling chain identity violated by {max_gap}"
        )));
    }
    Ok(LatentBundle {
        mu: mu.clone(),
        sigma: sigma.clone(),
        mu_p: mu_p.clone(),
        sigma_p: sigma_p.clone(),
        z_p,
        z,
    })
}

/// Inference-time draw from the utterance-specific prior:
/// `z = mu_p + temperature * sigma_p * eps`. Temperature 0 is the prior
/// mean (deterministic decode).
pub fn inference_sample(mu_p: &Matrix, sigma_p: &Matrix, temperature: f64,
                        eps: &Matrix) -> Result<Matrix> {
    check_same_shape("mu_p/sigma_p", mu_p, sigma_p)?;
    check_same_shape("mu_p/eps", mu_p, eps)?;
    if temperature < 0.0 {
        return Err(Error::Validation("temperature must be >= 0".into()));
    }
    Ok(mu_p + &(sigma_p * eps).mapv(|v| v * temperature))
}

/// Closed-form `KL(N(m1, s1^2) || N(m2, s2^2))` summed over all entries.
fn kl_gauss_sum(m1: &Matrix, s1: &Matrix, m2: &Matrix, s2: &Matrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..m1.nrows() {
        for j in 0..m1.ncols() {
            let (a, b, c, d) = (m1[(i, j)], s1[(i, j)], m2[(i, j)], s2[(i, j)]);
            acc += (d / b).ln() + (b * b + (a - c) * (a - c)) / (2.0 * d * d) - 0.5;
        }
    }
    acc
}

/// ELBO terms on plain data. The reconstruction term is a frame-weighted
/// MAE (the per-frame error is the mean absolute difference over mel
/// bands, weighted and averaged over frames); both KL terms are summed
/// over phonemes and latent dimensions.
pub fn elbo_loss(pred_mel: &Matrix, target_mel: &Matrix, bundle: &LatentBundle,
                 beta1: f64, beta2: f64, frame_weights: &[f64]) -> Result<ElboTerms> {
    check_same_shape("pred/target", pred_mel, target_mel)?;
    if frame_weights.len() != pred_mel.nrows() {
        return Err(Error::Shape(format!(
            "{} frame weights for {} frames",
            frame_weights.len(),
            pred_mel.nrows()
        )));
    }
    let n_frames = pred_mel.nrows() as f64;
    let n_bins = pred_mel.ncols() as f64;
    let mut recon = 0.0;
    for (f, w) in frame_weights.iter().enumerate() {
        let mut err = 0.0;
        for j in 0..pred_mel.ncols() {
            err += (pred_mel[(f, j)] - target_mel[(f, j)]).abs();
        }
        recon += w * err / n_bins;
    }
    recon /= n_frames;

    // q1: z | z_p, x ~ N(mu + sigma*mu_p, (sigma*sigma_p)^2)
    let m1 = &bundle.mu + &(&bundle.sigma * &bundle.mu_p);
    let s1 = &bundle.sigma * &bundle.sigma_p;
    let kl1 = kl_gauss_sum(&m1, &s1, &bundle.mu_p, &bundle.sigma_p);
    // q2 vs the standard Gaussian
    let ones = Matrix::ones(bundle.mu_p.dim());
    let zeros = Matrix::zeros(bundle.mu_p.dim());
    let kl2 = kl_gauss_sum(&bundle.mu_p, &bundle.sigma_p, &zeros, &ones);

    Ok(ElboTerms {
        recon,
        kl_posterior_prior: kl1,
        kl_prior_standard: kl2,
        beta1,
        beta2,
        total: recon + beta1 * kl1 + beta2 * kl2,
    })
}

/// ELBO terms as tape nodes (for training).
pub struct ElboVars {
    pub recon: Var,
    pub kl1: Var,
    pub kl2: Var,
    pub total: Var,
}

/// Build the training objective on the tape. `mu`/`log_sigma` are the
/// posterior heads, `mu_p`/`log_sigma_p` the prior heads; KL terms use the
/// same closed forms as [`elbo_loss`].
#[allow(clippy::too_many_arguments)]
pub fn elbo_vars(t: &mut Tape, pred: Var, target: &Matrix, mu: Var, log_sigma: Var,
                 mu_p: Var, log_sigma_p: Var, beta1: f64, beta2: f64,
                 frame_weights: &[f64]) -> ElboVars {
    let recon = t.frame_mae(pred, target, frame_weights);

    // kl1 elementwise: -ls + (s^2 sp^2 + (mu + (s-1) mu_p)^2) / (2 sp^2) - 1/2
    let s = t.exp(log_sigma);
    let sp = t.exp(log_sigma_p);
    let ssp = t.mul(s, sp);
    let ssp2 = t.mul(ssp, ssp);
    let s_minus_1 = t.add_scalar(s, -1.0);
    let shift = t.mul(s_minus_1, mu_p);
    let m = t.add(mu, shift);
    let m2 = t.mul(m, m);
    let num = t.add(ssp2, m2);
    let neg2lsp = t.scale(log_sigma_p, -2.0);
    let inv_sp2 = t.exp(neg2lsp);
    let half_inv_sp2 = t.scale(inv_sp2, 0.5);
    let frac = t.mul(num, half_inv_sp2);
    let frac_minus_ls = t.sub(frac, log_sigma);
    let kl1_elems = t.add_scalar(frac_minus_ls, -0.5);
    let kl1 = t.sum_all(kl1_elems);

    // kl2 elementwise: (mu_p^2 + sp^2) / 2 - lsp - 1/2
    let mp2 = t.mul(mu_p, mu_p);
    let two_lsp = t.scale(log_sigma_p, 2.0);
    let sp2 = t.exp(two_lsp);
    let sum = t.add(mp2, sp2);
    let half = t.scale(sum, 0.5);
    let minus_lsp = t.sub(half, log_sigma_p);
    let kl2_elems = t.add_scalar(minus_lsp, -0.5);
    let kl2 = t.sum_all(kl2_elems);

    let b1 = t.scale(kl1, beta1);
    let b2 = t.scale(kl2, beta2);
    let rk = t.add(recon, b1);
    let total = t.add(rk, b2);
    ElboVars {
        recon,
        kl1,
        kl2,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use tapegrad::nn::gaussian;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            ..ModelConfig::default()
        }
    }

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn zeroed_prior_heads_give_standard_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vae = CucVae::new(&toy_cfg(), 80, &mut rng);
        vae.prior_conv1.w.fill(0.0);
        vae.prior_conv2.w.fill(0.0);
        let mut t = Tape::new();
        let h = t.constant(gaussian(3, 8, 1.0, &mut rng));
        let (mu_p, lsp) = vae.prior(&mut t, h);
        assert_eq!(t.value(mu_p).dim(), (3, 2));
        assert_eq!(t.value(lsp).dim(), (3, 2));
        assert!(t.value(mu_p).iter().all(|&v| v == 0.0));
        // log sigma 0 means sigma = exp(0) = 1
        assert!(t.value(lsp).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posterior_handles_zero_duration_phonemes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vae = CucVae::new(&toy_cfg(), 80, &mut rng);
        let mel = gaussian(5, 80, 1.0, &mut rng);
        let mut t = Tape::new();
        let (mu, ls) = vae.posterior_from_mel(&mut t, &mel, &[2, 0, 3]).unwrap();
        assert_eq!(t.value(mu).dim(), (3, 2));
        assert!(t.value(mu).iter().all(|v| v.is_finite()));
        assert!(t.value(ls).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn posterior_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vae = CucVae::new(&toy_cfg(), 80, &mut rng);
        let mel = gaussian(6, 80, 1.0, &mut rng);
        let run = || {
            let mut t = Tape::new();
            let (mu, ls) = vae.posterior_from_mel(&mut t, &mel, &[3, 3]).unwrap();
            (t.value(mu).clone(), t.value(ls).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn posterior_rejects_duration_frame_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vae = CucVae::new(&toy_cfg(), 80, &mut rng);
        let mel = gaussian(5, 80, 1.0, &mut rng);
        let mut t = Tape::new();
        assert!(vae.posterior_from_mel(&mut t, &mel, &[2, 2]).is_err());
    }

    #[test]
    fn pooling_matches_hand_mean() {
        let mel = Matrix::from_shape_vec(
            (3, 2),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let pooled = pool_frames(&mel, &[3]).unwrap();
        assert_eq!(pooled[(0, 0)], 3.0);
        assert_eq!(pooled[(0, 1)], 4.0);
    }

    #[test]
    fn noise_free_sampling_reduces_to_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = randn(4, 2, &mut rng);
        let sigma = randn(4, 2, &mut rng).mapv(|v: f64| v.abs() + 0.1);
        let mu_p = randn(4, 2, &mut rng);
        let sigma_p = randn(4, 2, &mut rng).mapv(|v: f64| v.abs() + 0.1);
        let eps = Matrix::zeros((4, 2));
        let b = sample_latent(&mu, &sigma, &mu_p, &sigma_p, &eps).unwrap();
        assert_eq!(b.z_p, mu_p);
        let expect = &mu + &(&sigma * &mu_p);
        assert_eq!(b.z, expect);
    }

    #[test]
    fn identity_residual_makes_z_equal_z_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mu = Matrix::zeros((3, 2));
        let sigma = Matrix::ones((3, 2));
        let mu_p = randn(3, 2, &mut rng);
        let sigma_p = randn(3, 2, &mut rng).mapv(|v: f64| v.abs() + 0.2);
        let eps = randn(3, 2, &mut rng);
        let b = sample_latent(&mu, &sigma, &mu_p, &sigma_p, &eps).unwrap();
        assert_eq!(b.z, b.z_p);
    }

    #[test]
    fn monte_carlo_mean_of_z_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mu = randn(1, 2, &mut rng);
        let sigma = randn(1, 2, &mut rng).mapv(|v: f64| v.abs() + 0.3);
        let mu_p = randn(1, 2, &mut rng);
        let sigma_p = randn(1, 2, &mut rng).mapv(|v: f64| v.abs() + 0.3);
        let n = 10_000;
        let mut acc = Matrix::zeros((1, 2));
        for _ in 0..n {
            let eps = randn(1, 2, &mut rng);
            let b = sample_latent(&mu, &sigma, &mu_p, &sigma_p, &eps).unwrap();
            acc += &b.z;
        }
        acc /= n as f64;
        let expect = &mu + &(&sigma * &mu_p);
        for j in 0..2 {
            let std_err = (sigma[(0, j)] * sigma_p[(0, j)]) / (n as f64).sqrt();
            assert!(
                (acc[(0, j)] - expect[(0, j)]).abs() < 3.0 * std_err,
                "dim {j}: {} vs {}",
                acc[(0, j)],
                expect[(0, j)]
            );
        }
    }

    #[test]
    fn temperature_zero_gives_the_prior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu_p = randn(3, 2, &mut rng);
        let sigma_p = randn(3, 2, &mut rng).mapv(|v: f64| v.abs() + 0.1);
        let eps = randn(3, 2, &mut rng);
        let z = inference_sample(&mu_p, &sigma_p, 0.0, &eps).unwrap();
        assert_eq!(z, mu_p);
    }

    #[test]
    fn temperature_one_matches_identity_residual_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu_p = randn(3, 2, &mut rng);
        let sigma_p = randn(3, 2, &mut rng).mapv(|v: f64| v.abs() + 0.1);
        let eps = randn(3, 2, &mut rng);
        let z = inference_sample(&mu_p, &sigma_p, 1.0, &eps).unwrap();
        let b = sample_latent(
            &Matrix::zeros((3, 2)),
            &Matrix::ones((3, 2)),
            &mu_p,
            &sigma_p,
            &eps,
        )
        .unwrap();
        assert_eq!(z, b.z);
    }

    #[test]
    fn inference_sample_variance_tracks_sigma_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mu_p = Matrix::from_elem((1, 2), 0.7);
        let sigma_p = Matrix::from_shape_vec((1, 2), vec![0.5, 1.5]).unwrap();
        let n = 10_000;
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = randn(1, 2, &mut rng);
            let z = inference_sample(&mu_p, &sigma_p, 1.0, &eps).unwrap();
            for j in 0..2 {
                sums[j] += z[(0, j)];
                sq[j] += z[(0, j)] * z[(0, j)];
            }
        }
        for j in 0..2 {
            let mean = sums[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let expect = sigma_p[(0, j)] * sigma_p[(0, j)];
            assert!(
                (var - expect).abs() / expect < 0.05,
                "dim {j}: var {var} vs {expect}"
            );
        }
    }

    fn unit_bundle(rows: usize) -> LatentBundle {
        let zeros = Matrix::zeros((rows, 2));
        let ones = Matrix::ones((rows, 2));
        LatentBundle {
            mu: zeros.clone(),
            sigma: ones.clone(),
            mu_p: zeros.clone(),
            sigma_p: ones.clone(),
            z_p: zeros.clone(),
            z: zeros,
        }
    }

    #[test]
    fn all_unit_parameters_and_identical_mels_give_zero_loss() {
        let mel = Matrix::from_elem((4, 3), 0.3);
        let terms = elbo_loss(&mel, &mel, &unit_bundle(2), 1.0, 1.0, &[1.0; 4]).unwrap();
        assert_eq!(terms.recon, 0.0);
        assert!(terms.kl_posterior_prior.abs() < 1e-12);
        assert!(terms.kl_prior_standard.abs() < 1e-12);
        assert!(terms.total.abs() < 1e-12);
    }

    #[test]
    fn unit_shift_kl_is_half_per_dimension() {
        // KL(N(1,1) || N(0,1)) = 1/2 per dimension, via the kl2 term
        let mut b = unit_bundle(3);
        b.mu_p = Matrix::ones((3, 2));
        let mel = Matrix::zeros((2, 2));
        let terms = elbo_loss(&mel, &mel, &b, 1.0, 1.0, &[1.0; 2]).unwrap();
        assert!((terms.kl_prior_standard - 0.5 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn betas_zero_reduces_to_weighted_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pred = randn(3, 4, &mut rng);
        let target = randn(3, 4, &mut rng);
        let weights = [1.0, 2.0, 0.5];
        let mut b = unit_bundle(2);
        b.mu_p = randn(2, 2, &mut rng);
        let terms = elbo_loss(&pred, &target, &b, 0.0, 0.0, &weights).unwrap();
        let mut hand = 0.0;
        for f in 0..3 {
            let mut err = 0.0;
            for j in 0..4 {
                err += (pred[(f, j)] - target[(f, j)]).abs();
            }
            hand += weights[f] * err / 4.0;
        }
        hand /= 3.0;
        assert_eq!(terms.total, terms.recon);
        assert!((terms.recon - hand).abs() < 1e-15);
    }

    #[test]
    fn kl_terms_are_nonnegative_and_kl2_vanishes_only_at_the_standard_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let mu = randn(3, 2, &mut rng);
            let sigma = randn(3, 2, &mut rng).mapv(|v: f64| v.abs() + 0.2);
            let mu_p = randn(3, 2, &mut rng);
            let sigma_p = randn(3, 2, &mut rng).mapv(|v: f64| v.abs() + 0.2);
            let eps = randn(3, 2, &mut rng);
            let b = sample_latent(&mu, &sigma, &mu_p, &sigma_p, &eps).unwrap();
            let mel = Matrix::zeros((2, 2));
            let t = elbo_loss(&mel, &mel, &b, 1.0, 1.0, &[1.0; 2]).unwrap();
            assert!(t.kl_posterior_prior >= -1e-6);
            assert!(t.kl_prior_standard >= -1e-6);
        }
        let b = unit_bundle(4);
        let mel = Matrix::zeros((1, 1));
        let t = elbo_loss(&mel, &mel, &b, 1.0, 1.0, &[1.0]).unwrap();
        assert_eq!(t.kl_prior_standard, 0.0);
    }

    /// Monte-Carlo KL oracle: E_q[ln q(x) - ln p(x)] over `n` draws.
    fn mc_kl(m1: f64, s1: f64, m2: f64, s2: f64, n: usize,
             rng: &mut ChaCha8Rng) -> f64 {
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(rng);
            let x = m1 + s1 * e;
            let lq = -0.5 * ((x - m1) / s1).powi(2) - s1.ln();
            let lp = -0.5 * ((x - m2) / s2).powi(2) - s2.ln();
            acc += lq - lp;
        }
        acc / n as f64
    }

    #[test]
    fn closed_form_kls_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..5 {
            let mu = randn(1, 2, &mut rng).mapv(|v| v * 0.8);
            let sigma = randn(1, 2, &mut rng).mapv(|v: f64| 0.5 + 0.5 * v.abs());
            let mu_p = randn(1, 2, &mut rng).mapv(|v| v * 0.8 + 0.5);
            let sigma_p = randn(1, 2, &mut rng).mapv(|v: f64| 0.5 + 0.5 * v.abs());
            let eps = randn(1, 2, &mut rng);
            let b = sample_latent(&mu, &sigma, &mu_p, &sigma_p, &eps).unwrap();
            let mel = Matrix::zeros((1, 1));
            let t = elbo_loss(&mel, &mel, &b, 1.0, 1.0, &[1.0]).unwrap();
            let n = 100_000;
            let mut kl1_mc = 0.0;
            let mut kl2_mc = 0.0;
            for j in 0..2 {
                let m1 = mu[(0, j)] + sigma[(0, j)] * mu_p[(0, j)];
                let s1 = sigma[(0, j)] * sigma_p[(0, j)];
                kl1_mc += mc_kl(m1, s1, mu_p[(0, j)], sigma_p[(0, j)], n, &mut rng);
                kl2_mc += mc_kl(mu_p[(0, j)], sigma_p[(0, j)], 0.0, 1.0, n, &mut rng);
            }
            assert!(
                (t.kl_posterior_prior - kl1_mc).abs() / kl1_mc.abs().max(0.05) < 0.02,
                "trial {trial}: kl1 {} vs MC {kl1_mc}",
                t.kl_posterior_prior
            );
            assert!(
                (t.kl_prior_standard - kl2_mc).abs() / kl2_mc.abs().max(0.05) < 0.02,
                "trial {trial}: kl2 {} vs MC {kl2_mc}",
                t.kl_prior_standard
            );
        }
    }

    #[test]
    fn tape_elbo_matches_plain_elbo() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pred0 = randn(5, 3, &mut rng);
        let target = randn(5, 3, &mut rng);
        let mu0 = randn(4, 2, &mut rng);
        let ls0 = randn(4, 2, &mut rng).mapv(|v| v * 0.3);
        let mup0 = randn(4, 2, &mut rng);
        let lsp0 = randn(4, 2, &mut rng).mapv(|v| v * 0.3);
        let weights = [1.0, 1.5, 1.5, 1.0, 2.0];

        let mut t = Tape::new();
        let pred = t.constant(pred0.clone());
        let mu = t.constant(mu0.clone());
        let ls = t.constant(ls0.clone());
        let mup = t.constant(mup0.clone());
        let lsp = t.constant(lsp0.clone());
        let e = elbo_vars(&mut t, pred, &target, mu, ls, mup, lsp, 0.7, 0.3, &weights);

        let eps = Matrix::zeros((4, 2));
        let b = sample_latent(
            &mu0,
            &ls0.mapv(f64::exp),
            &mup0,
            &lsp0.mapv(f64::exp),
            &eps,
        )
        .unwrap();
        let plain = elbo_loss(&pred0, &target, &b, 0.7, 0.3, &weights).unwrap();
        assert!((t.scalar(e.recon) - plain.recon).abs() < 1e-12);
        assert!((t.scalar(e.kl1) - plain.kl_posterior_prior).abs() < 1e-9);
        assert!((t.scalar(e.kl2) - plain.kl_prior_standard).abs() < 1e-9);
        assert!((t.scalar(e.total) - plain.total).abs() < 1e-9);
    }

    #[test]
    fn prior_and_posterior_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut vae = CucVae::new(&toy_cfg(), 80, &mut rng);
        let h0 = gaussian(3, 8, 1.0, &mut rng);
        let mel = gaussian(6, 80, 1.0, &mut rng);
        let pred = gaussian(6, 80, 1.0, &mut rng);
        let target = gaussian(6, 80, 1.0, &mut rng);
        let durations = [2usize, 1, 3];
        let weights = vec![1.0; 6];
        let loss = |vae: &CucVae| {
            let mut t = Tape::new();
            let h = t.constant(h0.clone());
            let (mu_p, lsp) = vae.prior(&mut t, h);
            let (mu, ls) = vae.posterior_from_mel(&mut t, &mel, &durations).unwrap();
            let p = t.constant(pred.clone());
            let e = elbo_vars(&mut t, p, &target, mu, ls, mu_p, lsp, 1.0, 1.0, &weights);
            (t.scalar(e.total), e.total, t)
        };
        let (_, total, mut tape) = loss(&vae);
        let grads = tape.backward(total);
        for key in [
            "vae.prior.conv1.w",
            "vae.prior.conv2.w",
            "vae.post.conv1.w",
            "vae.post.conv2.w",
        ] {
            assert!(grads.contains_key(key), "missing gradient for {key}");
        }
        let err =
            tapegrad::gradcheck::max_rel_error(&mut vae, |m| loss(m).0, &grads, 10, 1e-5, 321);
        assert!(err < 1e-4, "vae gradient mismatch: {err}");
    }

    #[test]
    fn sampling_chain_identity_holds_for_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..200 {
            let mu = randn(2, 2, &mut rng);
            let sigma = randn(2, 2, &mut rng).mapv(|v: f64| v.abs() + 0.05);
            let mu_p = randn(2, 2, &mut rng);
            let sigma_p = randn(2, 2, &mut rng).mapv(|v: f64| v.abs() + 0.05);
            let eps = randn(2, 2, &mut rng);
            // sample_latent errors if the composed form deviates by > 1e-12
            sample_latent(&mu, &sigma, &mu_p, &sigma_p, &eps).unwrap();
        }
    }
}
