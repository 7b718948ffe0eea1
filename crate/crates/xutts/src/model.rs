//! The assembled synthesis model and its forward pipelines: TTS training,
//! masked editing training, prior-driven synthesis, posterior-driven
//! reconstruction, and entire-inference editing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tapegrad::nn::{Conv1d, HasParams};
use tapegrad::{Matrix, Tape, Var};

use crate::config::ModelConfig;
use crate::corpus::PhonemeTrack;
use crate::decoder::{length_regulate_var, AcousticDecoder};
use crate::editing::{biased_frame_weights, patch_and_smooth, EditPlan};
use crate::embedding::{CuEmbedding, TrainNoise};
use crate::error::{Error, Result};
use crate::vae::{elbo_vars, pool_frames, spans_from_durations, CucVae, ElboVars, LATENT_DIM};

/// Reserved vocabulary row for out-of-vocabulary symbols and speakers.
pub const OOV_INDEX: usize = 0;

pub struct TtsModel {
    pub cfg: ModelConfig,
    pub n_mels: usize,
    /// Phoneme symbols; index 0 is the OOV row.
    pub phoneme_vocab: Vec<String>,
    /// Speaker ids; index 0 is the OOV row.
    pub speaker_vocab: Vec<String>,
    pub embedding: CuEmbedding,
    pub vae: CucVae,
    pub decoder: AcousticDecoder,
    /// Edit-boundary smoother over `(mu, log sigma)` rows; identity at
    /// initialization and only trained by the editing objective.
    pub smooth: Conv1d,
}

impl TtsModel {
    pub fn new(cfg: &ModelConfig, n_mels: usize, phoneme_vocab: Vec<String>,
               speaker_vocab: Vec<String>, init_seed: u64) -> Result<Self> {
        if phoneme_vocab.is_empty() || phoneme_vocab[0] != "<oov>" {
            return Err(Error::Validation(
                "phoneme vocabulary must start with the <oov> row".into(),
            ));
        }
        if speaker_vocab.is_empty() || speaker_vocab[0] != "<oov>" {
            return Err(Error::Validation(
                "speaker vocabulary must start with the <oov> row".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        Ok(Self {
            cfg: cfg.clone(),
            n_mels,
            embedding: CuEmbedding::new(cfg, phoneme_vocab.len(), speaker_vocab.len(), &mut rng),
            vae: CucVae::new(cfg, n_mels, &mut rng),
            decoder: AcousticDecoder::new(cfg, n_mels, &mut rng),
            smooth: Conv1d::identity("editing.smooth", 2 * LATENT_DIM, cfg.smooth_kernel),
            phoneme_vocab,
            speaker_vocab,
        })
    }

    pub fn phoneme_ids(&self, phonemes: &[String]) -> Vec<usize> {
        phonemes
            .iter()
            .map(|p| {
                self.phoneme_vocab
                    .iter()
                    .position(|v| v == p)
                    .unwrap_or(OOV_INDEX)
            })
            .collect()
    }

    pub fn speaker_index(&self, speaker: &str) -> usize {
        self.speaker_vocab
            .iter()
            .position(|v| v == speaker)
            .unwrap_or(OOV_INDEX)
    }

    /// True when every symbol falls back to the OOV row.
    pub fn all_oov(&self, ids: &[usize]) -> bool {
        ids.iter().all(|&i| i == OOV_INDEX)
    }
}

impl HasParams for TtsModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.embedding.visit(f);
        self.vae.visit(f);
        self.decoder.visit(f);
        self.smooth.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.embedding.visit_mut(f);
        self.vae.visit_mut(f);
        self.decoder.visit_mut(f);
        self.smooth.visit_mut(f);
    }
}

/// `z_p = mu_p + sigma_p * eps`, `z = mu + sigma * z_p` on the tape, with
/// sigmas supplied as log values.
fn sample_z_vars(t: &mut Tape, mu: Var, log_sigma: Var, mu_p: Var, log_sigma_p: Var,
                 eps: &Matrix) -> (Var, Var) {
    let sp = t.exp(log_sigma_p);
    let e = t.constant(eps.clone());
    let spe = t.mul(sp, e);
    let z_p = t.add(mu_p, spe);
    let s = t.exp(log_sigma);
    let sz = t.mul(s, z_p);
    let z = t.add(mu, sz);
    (z_p, z)
}

/// One utterance's training inputs.
pub struct ForwardItem<'a> {
    pub phoneme_ids: &'a [usize],
    pub speaker_idx: usize,
    pub context: &'a Matrix,
    pub durations: &'a [usize],
    pub mel: &'a Matrix,
}

/// Scalar views of one training step's loss components.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl1: f64,
    pub kl2: f64,
    pub dur: f64,
}

pub struct ForwardLoss {
    pub total: Var,
    pub elbo: ElboVars,
    pub dur: Var,
}

impl ForwardLoss {
    pub fn parts(&self, t: &Tape) -> LossParts {
        LossParts {
            total: t.scalar(self.total),
            recon: t.scalar(self.elbo.recon),
            kl1: t.scalar(self.elbo.kl1),
            kl2: t.scalar(self.elbo.kl2),
            dur: t.scalar(self.dur),
        }
    }
}

fn duration_targets(durations: &[usize]) -> Matrix {
    Matrix::from_shape_vec(
        (durations.len(), 1),
        durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect(),
    )
    .expect("column vector")
}

fn duration_mse(t: &mut Tape, log_dur: Var, durations: &[usize]) -> Var {
    let target = t.constant(duration_targets(durations));
    let d = t.sub(log_dur, target);
    let d2 = t.mul(d, d);
    t.mean_all(d2)
}

impl TtsModel {
    /// TTS training objective: posterior-conditioned reconstruction with
    /// ground-truth durations plus the two KL terms and the duration MSE.
    pub fn train_forward_tts(&self, t: &mut Tape, item: &ForwardItem, eps: &Matrix,
                             beta1: f64, beta2: f64,
                             mut noise: Option<&mut TrainNoise>) -> Result<ForwardLoss> {
        let frames: usize = item.durations.iter().sum();
        if frames != item.mel.nrows() {
            return Err(Error::Shape(format!(
                "durations cover {frames} frames but the mel has {}",
                item.mel.nrows()
            )));
        }
        let cu = self.embedding.forward(
            t,
            item.phoneme_ids,
            item.speaker_idx,
            item.context,
            noise.as_deref_mut(),
        )?;
        let (mu_p, lsp) = self.vae.prior(t, cu.h);
        let pooled = t.constant(pool_frames(item.mel, item.durations)?);
        let (mu, ls) = self.vae.posterior_from_pooled(t, pooled);
        let (_z_p, z) = sample_z_vars(t, mu, ls, mu_p, lsp, eps);
        let injected = self.decoder.inject_latent(t, cu.h, z)?;
        let regulated = length_regulate_var(t, injected, item.durations)?;
        let pred = self.decoder.decode(t, regulated)?;
        let weights = vec![1.0; frames];
        let elbo = elbo_vars(t, pred, item.mel, mu, ls, mu_p, lsp, beta1, beta2, &weights);
        let dur = duration_mse(t, cu.log_dur, item.durations);
        let total = t.add(elbo.total, dur);
        Ok(ForwardLoss { total, elbo, dur })
    }

    /// Editing training objective: the masked words are treated as the
    /// edited region (`b' = b`), the posterior sees only unedited frames,
    /// the patched prior is smoothed, and the reconstruction loss uses the
    /// caller's per-frame weights (biased by lambda on masked frames in
    /// production; see [`crate::editing::biased_frame_weights`]).
    #[allow(clippy::too_many_arguments)]
    pub fn train_forward_se(&self, t: &mut Tape, item: &ForwardItem, plan: &EditPlan,
                            eps: &Matrix, beta1: f64, beta2: f64, weights: &[f64],
                            mut noise: Option<&mut TrainNoise>) -> Result<ForwardLoss> {
        let frames: usize = item.durations.iter().sum();
        if frames != item.mel.nrows() {
            return Err(Error::Shape(format!(
                "durations cover {frames} frames but the mel has {}",
                item.mel.nrows()
            )));
        }
        let cu = self.embedding.forward(
            t,
            item.phoneme_ids,
            item.speaker_idx,
            item.context,
            noise.as_deref_mut(),
        )?;
        let (mu_p, lsp) = self.vae.prior(t, cu.h);
        let pooled = t.constant(pool_unedited(item.mel, &plan.original, &plan.flag_del)?);
        let (mu_u, ls_u) = self.vae.posterior_from_pooled(t, pooled);
        let patched = patch_and_smooth(t, mu_u, ls_u, plan, &self.smooth)?;
        let (_z_p, z) =
            sample_z_vars(t, patched.mu_prime, patched.log_sigma_prime, mu_p, lsp, eps);
        let injected = self.decoder.inject_latent(t, cu.h, z)?;
        let regulated = length_regulate_var(t, injected, item.durations)?;
        let pred = self.decoder.decode(t, regulated)?;
        let weights = biased_frame_weights(plan, lambda)?;
        if weights.len() != frames {
            return Err(Error::Shape(
                "frame mask does not cover the training mel".into(),
            ));
        }
        let elbo = elbo_vars(
            t,
            pred,
            item.mel,
            patched.mu_prime,
            patched.log_sigma_prime,
            mu_p,
            lsp,
            beta1,
            beta2,
            &weights,
        );
        let dur = duration_mse(t, cu.log_dur, item.durations);
        let total = t.add(elbo.total, dur);
        Ok(ForwardLoss { total, elbo, dur })
    }

    /// Synthesis from the utterance-specific prior:
    /// `z = mu_p + temperature * sigma_p * eps`, predicted durations.
    /// Returns the mel and the durations used.
    pub fn synthesize(&self, phoneme_ids: &[usize], speaker_idx: usize, context: &Matrix,
                      temperature: f64, eps: &Matrix) -> Result<(Matrix, Vec<usize>)> {
        if temperature < 0.0 {
            return Err(Error::Validation("temperature must be >= 0".into()));
        }
        if self.all_oov(phoneme_ids) {
            return Err(Error::Validation(
                "no phoneme of the input is covered by the model vocabulary".into(),
            ));
        }
        let mut t = Tape::new();
        let cu = self
            .embedding
            .forward(&mut t, phoneme_ids, speaker_idx, context, None)?;
        let (mu_p, lsp) = self.vae.prior(&mut t, cu.h);
        let sp = t.exp(lsp);
        let e = t.constant(eps.mapv(|v| v * temperature));
        let spe = t.mul(sp, e);
        let z = t.add(mu_p, spe);
        let durations = predicted_durations(t.value(cu.log_dur));
        if durations.iter().sum::<usize>() == 0 {
            return Err(Error::Validation(
                "predicted durations sum to zero frames".into(),
            ));
        }
        let injected = self.decoder.inject_latent(&mut t, cu.h, z)?;
        let regulated = length_regulate_var(&mut t, injected, &durations)?;
        let pred = self.decoder.decode(&mut t, regulated)?;
        Ok((t.value(pred).clone(), durations))
    }

    /// Posterior-driven reconstruction with ground-truth durations: the
    /// deterministic analysis-synthesis path (`z = mu + sigma * z_p`).
    pub fn reconstruct(&self, phoneme_ids: &[usize], speaker_idx: usize, context: &Matrix,
                       durations: &[usize], mel: &Matrix, eps: &Matrix) -> Result<Matrix> {
        let mut t = Tape::new();
        let cu = self
            .embedding
            .forward(&mut t, phoneme_ids, speaker_idx, context, None)?;
        let (mu_p, lsp) = self.vae.prior(&mut t, cu.h);
        let pooled = t.constant(pool_frames(mel, durations)?);
        let (mu, ls) = self.vae.posterior_from_pooled(&mut t, pooled);
        let (_z_p, z) = sample_z_vars(&mut t, mu, ls, mu_p, lsp, eps);
        let injected = self.decoder.inject_latent(&mut t, cu.h, z)?;
        let regulated = length_regulate_var(&mut t, injected, durations)?;
        let pred = self.decoder.decode(&mut t, regulated)?;
        Ok(t.value(pred).clone())
    }

    /// Entire-inference editing: regenerate the complete mel for the
    /// edited phoneme sequence. The posterior anchors unedited positions
    /// (their noise is zeroed, so they decode deterministically); the
    /// edited region samples from the smoothed, patched prior. Returns the
    /// mel and the adjusted durations.
    #[allow(clippy::too_many_arguments)]
    pub fn edit_infer(&self, edited_ids: &[usize], speaker_idx: usize, context: &Matrix,
                      plan: &EditPlan, original_mel: &Matrix,
                      eps: &Matrix) -> Result<(Matrix, Vec<usize>)> {
        plan.validate()?;
        if edited_ids.len() != plan.edited.len() {
            return Err(Error::Shape(
                "phoneme ids do not match the edited track".into(),
            ));
        }
        if plan.original.total_frames() != original_mel.nrows() {
            return Err(Error::Shape(format!(
                "original mel has {} frames, alignment covers {}",
                original_mel.nrows(),
                plan.original.total_frames()
            )));
        }
        if eps.dim() != (plan.edited.len(), LATENT_DIM) {
            return Err(Error::Shape("eps must be [T' x 2]".into()));
        }
        if plan.edited.is_empty() {
            return Err(Error::Validation(
                "the edited sequence is empty; nothing to synthesize".into(),
            ));
        }
        let mut t = Tape::new();
        let cu = self
            .embedding
            .forward(&mut t, edited_ids, speaker_idx, context, None)?;
        let (mu_p, lsp) = self.vae.prior(&mut t, cu.h);
        let pooled = t.constant(pool_unedited(original_mel, &plan.original, &plan.flag_del)?);
        let (mu_u, ls_u) = self.vae.posterior_from_pooled(&mut t, pooled);
        let patched = patch_and_smooth(&mut t, mu_u, ls_u, plan, &self.smooth)?;
        // noise only inside the regenerated region
        let mut masked_eps = eps.clone();
        for (i, added) in plan.flag_add.iter().enumerate() {
            if !added {
                masked_eps[(i, 0)] = 0.0;
                masked_eps[(i, 1)] = 0.0;
            }
        }
        let (_z_p, z) = sample_z_vars(
            &mut t,
            patched.mu_prime,
            patched.log_sigma_prime,
            mu_p,
            lsp,
            &masked_eps,
        );
        let predicted = predicted_frames_f64(t.value(cu.log_dur));
        let adjusted = crate::editing::adjust_durations(&predicted, plan)?;
        if adjusted.iter().sum::<usize>() == 0 {
            return Err(Error::Validation(
                "adjusted durations sum to zero frames".into(),
            ));
        }
        let injected = self.decoder.inject_latent(&mut t, cu.h, z)?;
        let regulated = length_regulate_var(&mut t, injected, &adjusted)?;
        let pred = self.decoder.decode(&mut t, regulated)?;
        Ok((t.value(pred).clone(), adjusted))
    }
}

/// Mean-pool the frames of every surviving (non-deleted) original phoneme.
fn pool_unedited(mel: &Matrix, original: &PhonemeTrack, flag_del: &[bool]) -> Result<Matrix> {
    if original.total_frames() != mel.nrows() {
        return Err(Error::Shape(format!(
            "alignment covers {} frames but the mel has {}",
            original.total_frames(),
            mel.nrows()
        )));
    }
    let spans = spans_from_durations(&original.durations_frames);
    let keep: Vec<(usize, usize)> = spans
        .iter()
        .zip(flag_del)
        .filter(|(_, del)| !**del)
        .map(|(s, _)| *s)
        .collect();
    let mut out = Matrix::zeros((keep.len(), mel.ncols()));
    for (r, &(a, b)) in keep.iter().enumerate() {
        if a == b {
            continue;
        }
        let inv = 1.0 / (b - a) as f64;
        for j in 0..mel.ncols() {
            let mut acc = 0.0;
            for i in a..b {
                acc += mel[(i, j)];
            }
            out[(r, j)] = acc * inv;
        }
    }
    Ok(out)
}

/// Predicted duration in frames as a float, from log(d + 1).
fn predicted_frames_f64(log_dur: &Matrix) -> Vec<f64> {
    log_dur
        .column(0)
        .iter()
        .map(|&v| (v.exp() - 1.0).max(0.0))
        .collect()
}

/// Rounded predicted durations for synthesis.
fn predicted_durations(log_dur: &Matrix) -> Vec<usize> {
    predicted_frames_f64(log_dur)
        .into_iter()
        .map(|v| v.round().max(0.0) as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EditOp, EditScript};
    use crate::editing::build_edit_plan;
    use rand::SeedableRng;
    use tapegrad::nn::gaussian;

    pub(crate) fn toy_model_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 1,
            n_dec_blocks: 1,
            n_heads: 2,
            fusion_heads: 2,
            ffn_hidden: 20,
            ffn_kernel: 3,
            dur_kernel: 3,
            smooth_kernel: 5,
            d_ctx: 12,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn vocab(names: &[&str]) -> Vec<String> {
        let mut v = vec!["<oov>".to_string()];
        v.extend(names.iter().map(|s| s.to_string()));
        v
    }

    fn toy_model(n_mels: usize) -> TtsModel {
        TtsModel::new(
            &toy_model_cfg(),
            n_mels,
            vocab(&["AA", "B", "C", "D"]),
            vocab(&["s1"]),
            7,
        )
        .unwrap()
    }

    fn toy_track() -> PhonemeTrack {
        PhonemeTrack {
            phonemes: vec!["AA".into(), "B".into(), "C".into(), "D".into()],
            durations_frames: vec![2, 3, 1, 2],
            word_spans: vec![(0, 2), (2, 4)],
        }
    }

    #[test]
    fn tts_forward_produces_finite_losses_and_gradients_everywhere() {
        let model = toy_model(80);
        let track = toy_track();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mel = gaussian(8, 80, 1.0, &mut rng);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let ids = model.phoneme_ids(&track.phonemes);
        let item = ForwardItem {
            phoneme_ids: &ids,
            speaker_idx: 1,
            context: &ctx,
            durations: &track.durations_frames,
            mel: &mel,
        };
        let eps = gaussian(4, 2, 1.0, &mut rng);
        let mut t = Tape::new();
        let loss = model
            .train_forward_tts(&mut t, &item, &eps, 1.0, 1.0, None)
            .unwrap();
        let parts = loss.parts(&t);
        assert!(parts.total.is_finite());
        assert!(parts.recon > 0.0);
        let grads = t.backward(loss.total);
        // every pipeline stage contributes parameters
        for key in [
            "embedding.phoneme.table",
            "embedding.fusion.wq",
            "embedding.proj.w",
            "embedding.dur.out.w",
            "vae.prior.conv2.w",
            "vae.post.conv2.w",
            "decoder.z_proj.w",
            "decoder.out.w",
        ] {
            assert!(grads.contains_key(key), "no gradient for {key}");
        }
        // the editing smoother is not part of the TTS objective
        assert!(!grads.contains_key("editing.smooth.w"));
    }

    #[test]
    fn se_forward_trains_the_smoother_too() {
        let model = toy_model(80);
        let track = toy_track();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mel = gaussian(8, 80, 1.0, &mut rng);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let ids = model.phoneme_ids(&track.phonemes);
        let plan = crate::editing::sample_training_mask(&track, 0.5, 0).unwrap();
        let item = ForwardItem {
            phoneme_ids: &ids,
            speaker_idx: 1,
            context: &ctx,
            durations: &track.durations_frames,
            mel: &mel,
        };
        let eps = gaussian(4, 2, 1.0, &mut rng);
        let mut t = Tape::new();
        let loss = model
            .train_forward_se(&mut t, &item, &plan, &eps, 1.0, 1.0, 1.5, None)
            .unwrap();
        assert!(loss.parts(&t).total.is_finite());
        let grads = t.backward(loss.total);
        assert!(grads.contains_key("editing.smooth.w"));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // toy-size composite check across embedding, vae, and decoder
        let mut model = toy_model(6);
        let track = toy_track();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mel = gaussian(8, 6, 1.0, &mut rng);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let ids = model.phoneme_ids(&track.phonemes);
        let eps = gaussian(4, 2, 1.0, &mut rng);
        let durations = track.durations_frames.clone();
        let loss_of = |m: &TtsModel| {
            let item = ForwardItem {
                phoneme_ids: &ids,
                speaker_idx: 1,
                context: &ctx,
                durations: &durations,
                mel: &mel,
            };
            let mut t = Tape::new();
            let loss = m
                .train_forward_tts(&mut t, &item, &eps, 0.8, 0.6, None)
                .unwrap();
            (t.scalar(loss.total), loss.total, t)
        };
        let (_, total, mut tape) = loss_of(&model);
        let grads = tape.backward(total);
        let err =
            tapegrad::gradcheck::max_rel_error(&mut model, |m| loss_of(m).0, &grads, 4, 1e-5, 55);
        assert!(err < 1e-4, "composite gradient mismatch: {err}");
    }

    #[test]
    fn synthesis_is_deterministic_at_temperature_zero() {
        let mut model = toy_model(80);
        // an untrained duration head predicts ~0 frames; give it a bias
        model.embedding.dur_out.b.as_mut().unwrap().fill(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let ids = vec![1, 2, 3];
        let eps = gaussian(3, 2, 1.0, &mut rng);
        let (a, da) = model.synthesize(&ids, 1, &ctx, 0.0, &eps).unwrap();
        let (b, db) = model.synthesize(&ids, 1, &ctx, 0.0, &eps).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
        // temperature 1 with different noise differs
        let eps2 = gaussian(3, 2, 1.0, &mut rng);
        let (c, _) = model.synthesize(&ids, 1, &ctx, 1.0, &eps).unwrap();
        let (d, _) = model.synthesize(&ids, 1, &ctx, 1.0, &eps2).unwrap();
        assert_ne!(c, d);
        // and temperature 0 ignores the noise entirely
        let (e, _) = model.synthesize(&ids, 1, &ctx, 0.0, &eps2).unwrap();
        assert_eq!(a, e);
    }

    #[test]
    fn all_oov_text_is_rejected() {
        let model = toy_model(80);
        let ctx = Matrix::zeros((0, 12));
        let eps = Matrix::zeros((2, 2));
        assert!(model.synthesize(&[0, 0], 1, &ctx, 0.0, &eps).is_err());
    }

    #[test]
    fn identity_edit_equals_reconstruction_bit_for_bit() {
        let model = toy_model(80);
        let track = toy_track();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mel = gaussian(8, 80, 1.0, &mut rng);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let ids = model.phoneme_ids(&track.phonemes);
        let eps0 = Matrix::zeros((4, 2));
        let recon = model
            .reconstruct(&ids, 1, &ctx, &track.durations_frames, &mel, &eps0)
            .unwrap();
        let plan = EditPlan::identity(&track);
        let (edited, durations) = model
            .edit_infer(&ids, 1, &ctx, &plan, &mel, &eps0)
            .unwrap();
        assert_eq!(durations, track.durations_frames);
        assert_eq!(recon, edited, "identity edit deviates from reconstruction");
    }

    #[test]
    fn edit_noise_is_confined_to_the_edited_region_latents() {
        let mut model = toy_model(80);
        // pin the duration head so every phoneme predicts ~3.5 frames and
        // the adjustment ratio is well defined
        model.embedding.dur_out.w.fill(0.0);
        model.embedding.dur_out.b.as_mut().unwrap().fill(1.5);
        let track = toy_track();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mel = gaussian(8, 80, 1.0, &mut rng);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let repl = PhonemeTrack {
            phonemes: vec!["D".into(), "B".into()],
            durations_frames: vec![0, 0],
            word_spans: vec![(0, 2)],
        };
        let script = EditScript {
            id: "u".into(),
            op: EditOp::Replace,
            word_start: 1,
            word_end: 2,
            text: "x".into(),
        };
        let plan = build_edit_plan(&track, &script, &repl).unwrap();
        let ids = model.phoneme_ids(&plan.edited.phonemes);
        let eps_a = gaussian(plan.edited.len(), 2, 1.0, &mut rng);
        let eps_b = gaussian(plan.edited.len(), 2, 1.0, &mut rng);
        let (mel_a, dur_a) = model.edit_infer(&ids, 1, &ctx, &plan, &mel, &eps_a).unwrap();
        let (mel_b, dur_b) = model.edit_infer(&ids, 1, &ctx, &plan, &mel, &eps_b).unwrap();
        assert_eq!(dur_a, dur_b, "durations must not depend on the noise");
        // frames owned by unedited phonemes see only attention leakage;
        // frames in the regenerated region change directly with the noise
        let mask = plan.frame_mask_with(&dur_a);
        let mut max_in = 0.0_f64;
        let mut max_out = 0.0_f64;
        for f in 0..mel_a.nrows() {
            for j in 0..mel_a.ncols() {
                let d = (mel_a[(f, j)] - mel_b[(f, j)]).abs();
                if mask[f] {
                    max_in = max_in.max(d);
                } else {
                    max_out = max_out.max(d);
                }
            }
        }
        assert!(max_in > 0.0);
        assert!(
            max_out < max_in,
            "noise affected unedited frames ({max_out}) as much as edited ones ({max_in})"
        );
    }

    #[test]
    fn delete_edit_frame_budget_is_exact() {
        let model = toy_model(80);
        let track = toy_track();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mel = gaussian(8, 80, 1.0, &mut rng);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let script = EditScript {
            id: "u".into(),
            op: EditOp::Delete,
            word_start: 0,
            word_end: 1,
            text: String::new(),
        };
        let plan = build_edit_plan(
            &track,
            &script,
            &PhonemeTrack {
                phonemes: vec![],
                durations_frames: vec![],
                word_spans: vec![],
            },
        )
        .unwrap();
        let ids = model.phoneme_ids(&plan.edited.phonemes);
        let eps = Matrix::zeros((plan.edited.len(), 2));
        let (out, durations) = model.edit_infer(&ids, 1, &ctx, &plan, &mel, &eps).unwrap();
        assert_eq!(out.nrows(), durations.iter().sum::<usize>());
        assert_eq!(durations, vec![1, 2], "unedited durations are kept");
    }

    #[test]
    fn standard_prior_ablation_fixes_the_prior() {
        let mut cfg = toy_model_cfg();
        cfg.standard_prior = true;
        let model = TtsModel::new(&cfg, 80, vocab(&["AA", "B"]), vocab(&["s1"]), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let mut t = Tape::new();
        let cu = model
            .embedding
            .forward(&mut t, &[1, 2], 1, &ctx, None)
            .unwrap();
        let (mu_p, lsp) = model.vae.prior(&mut t, cu.h);
        assert!(t.value(mu_p).iter().all(|&v| v == 0.0));
        assert!(t.value(lsp).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_with_unit_lambda_equals_uniform_weights_bit_for_bit() {
        let model = toy_model(80);
        let track = toy_track();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mel = gaussian(8, 80, 1.0, &mut rng);
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let ids = model.phoneme_ids(&track.phonemes);
        let plan = crate::editing::sample_training_mask(&track, 0.5, 0).unwrap();
        let eps = gaussian(4, 2, 1.0, &mut rng);
        let item = ForwardItem {
            phoneme_ids: &ids,
            speaker_idx: 1,
            context: &ctx,
            durations: &track.durations_frames,
            mel: &mel,
        };
        let mut t1 = Tape::new();
        let l1 = model
            .train_forward_se(&mut t1, &item, &plan, &eps, 1.0, 1.0, 1.0, None)
            .unwrap();
        // manual uniform-weight forward of the same graph
        let mut t2 = Tape::new();
        let cu = model
            .embedding
            .forward(&mut t2, &ids, 1, &ctx, None)
            .unwrap();
        let (mu_p, lsp) = model.vae.prior(&mut t2, cu.h);
        let pooled = t2
            .constant(pool_unedited(&mel, &plan.original, &plan.flag_del).unwrap());
        let (mu_u, ls_u) = model.vae.posterior_from_pooled(&mut t2, pooled);
        let patched = patch_and_smooth(&mut t2, mu_u, ls_u, &plan, &model.smooth).unwrap();
        let (_zp, z) = sample_z_vars(
            &mut t2,
            patched.mu_prime,
            patched.log_sigma_prime,
            mu_p,
            lsp,
            &eps,
        );
        let injected = model.decoder.inject_latent(&mut t2, cu.h, z).unwrap();
        let regulated =
            length_regulate_var(&mut t2, injected, &track.durations_frames).unwrap();
        let pred = model.decoder.decode(&mut t2, regulated).unwrap();
        let uniform = vec![1.0; 8];
        let elbo = elbo_vars(
            &mut t2,
            pred,
            &mel,
            patched.mu_prime,
            patched.log_sigma_prime,
            mu_p,
            lsp,
            1.0,
            1.0,
            &uniform,
        );
        let dur = duration_mse(&mut t2, cu.log_dur, &track.durations_frames);
        let total2 = t2.add(elbo.total, dur);
        assert_eq!(t1.scalar(l1.total), t2.scalar(total2));
    }

    #[test]
    fn edit_rejects_inconsistent_inputs() {
        let model = toy_model(80);
        let track = toy_track();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mel = gaussian(7, 80, 1.0, &mut rng); // wrong frame count
        let ctx = gaussian(2, 12, 1.0, &mut rng);
        let plan = EditPlan::identity(&track);
        let ids = model.phoneme_ids(&track.phonemes);
        let eps = Matrix::zeros((4, 2));
        assert!(model.edit_infer(&ids, 1, &ctx, &plan, &mel, &eps).is_err());
    }

    #[test]
    fn predicted_duration_rounding() {
        let log_dur =
            Matrix::from_shape_vec((3, 1), vec![(3.5f64 + 1.0).ln(), 0.0, (0.2f64 + 1.0).ln()])
                .unwrap();
        assert_eq!(predicted_durations(&log_dur), vec![4, 0, 0]);
    }
}
