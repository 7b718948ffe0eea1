//! Objective evaluation: F0 frame error, mel-cepstral distortion,
//! per-phoneme prosody-diversity statistics, and word error rate.
//!
//! Tracks of unequal length are the caller's problem; the harness
//! truncates both sides to the shorter length before calling in here
//! (dynamic time warping is out of scope).

use tapegrad::Matrix;

use crate::audio::ProsodyTracks;
use crate::corpus::PhonemeTrack;
use crate::error::{Error, Result};
use crate::vae::spans_from_durations;

/// F0 frame error and its components.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FfeBreakdown {
    pub n_total: usize,
    pub n_u_to_v: usize,
    pub n_v_to_u: usize,
    pub n_f0e: usize,
    pub ffe: f64,
}

/// Relative F0 deviation beyond which a doubly-voiced frame is an error.
const F0_ERROR_RATIO: f64 = 0.2;

/// dB scaling constant for mel-cepstral distortion, `10 sqrt(2) / ln 10`.
pub const MCD_SCALE_DB: f64 = 6.141851463713754;

/// Fraction of frames with a voicing error or more than 20% F0 deviation.
pub fn ffe(reference: &ProsodyTracks, estimate: &ProsodyTracks) -> Result<FfeBreakdown> {
    let n = reference.n_frames();
    if n == 0 {
        return Err(Error::Validation("FFE over zero frames".into()));
    }
    if estimate.n_frames() != n {
        return Err(Error::Shape(format!(
            "reference has {n} frames, estimate {}",
            estimate.n_frames()
        )));
    }
    let mut u_to_v = 0;
    let mut v_to_u = 0;
    let mut f0e = 0;
    for i in 0..n {
        match (reference.voiced[i], estimate.voiced[i]) {
            (false, true) => u_to_v += 1,
            (true, false) => v_to_u += 1,
            (true, true) => {
                if (estimate.f0_hz[i] / reference.f0_hz[i] - 1.0).abs() > F0_ERROR_RATIO {
                    f0e += 1;
                }
            }
            (false, false) => {}
        }
    }
    Ok(FfeBreakdown {
        n_total: n,
        n_u_to_v: u_to_v,
        n_v_to_u: v_to_u,
        n_f0e: f0e,
        ffe: (u_to_v + v_to_u + f0e) as f64 / n as f64,
    })
}

/// Mel-cepstral distortion in dB: per-frame Euclidean distance over the
/// cepstral coefficients, averaged over frames, scaled by `10 sqrt(2)/ln 10`.
pub fn mcd(reference: &Matrix, estimate: &Matrix) -> Result<f64> {
    if reference.dim() != estimate.dim() {
        return Err(Error::Shape(format!(
            "MFCC shapes differ: {:?} vs {:?}",
            reference.dim(),
            estimate.dim()
        )));
    }
    let n = reference.nrows();
    if n == 0 {
        return Err(Error::Validation("MCD over zero frames".into()));
    }
    let mut acc = 0.0;
    for f in 0..n {
        let mut d2 = 0.0;
        for j in 0..reference.ncols() {
            let d = reference[(f, j)] - estimate[(f, j)];
            d2 += d * d;
        }
        acc += d2.sqrt();
    }
    Ok(MCD_SCALE_DB * acc / n as f64)
}

/// Per-phoneme prosody spread across repeated samples of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ProsodyStats {
    pub f0_std_hz: f64,
    pub energy_std: f64,
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Standard deviation of per-phoneme mean F0 (voiced frames only) and mean
/// relative energy across samples, averaged over phonemes. Relative energy
/// is frame energy normalized by the utterance mean. Population standard
/// deviation throughout. Phonemes without voiced frames in at least two
/// samples are skipped for F0; if every phoneme is skipped this is an
/// error.
pub fn prosody_diversity(samples: &[ProsodyTracks], track: &PhonemeTrack) -> Result<ProsodyStats> {
    if samples.len() < 2 {
        return Err(Error::Validation(
            "prosody diversity needs at least two samples".into(),
        ));
    }
    let total = track.total_frames();
    for (i, s) in samples.iter().enumerate() {
        if s.n_frames() != total {
            return Err(Error::Shape(format!(
                "sample {i} has {} frames, durations cover {total}",
                s.n_frames()
            )));
        }
    }
    let spans = spans_from_durations(&track.durations_frames);
    let mut f0_stds = Vec::new();
    let mut energy_stds = Vec::new();
    for &(a, b) in &spans {
        if a == b {
            continue;
        }
        let mut f0_means = Vec::new();
        let mut energy_means = Vec::new();
        for s in samples {
            let mean_energy = s.energy.iter().sum::<f64>() / s.energy.len() as f64;
            let rel: f64 = if mean_energy > 0.0 {
                s.energy[a..b].iter().sum::<f64>() / (b - a) as f64 / mean_energy
            } else {
                0.0
            };
            energy_means.push(rel);
            let voiced: Vec<f64> = (a..b).filter(|&i| s.voiced[i]).map(|i| s.f0_hz[i]).collect();
            if !voiced.is_empty() {
                f0_means.push(voiced.iter().sum::<f64>() / voiced.len() as f64);
            }
        }
        energy_stds.push(population_std(&energy_means));
        if f0_means.len() >= 2 {
            f0_stds.push(population_std(&f0_means));
        }
    }
    if f0_stds.is_empty() {
        return Err(Error::Validation(
            "no phoneme had voiced frames in at least two samples".into(),
        ));
    }
    Ok(ProsodyStats {
        f0_std_hz: f0_stds.iter().sum::<f64>() / f0_stds.len() as f64,
        energy_std: energy_stds.iter().sum::<f64>() / energy_stds.len() as f64,
    })
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let cleaned: String = w
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            (!cleaned.is_empty()).then_some(cleaned)
        })
        .collect()
}

/// Word error rate: Levenshtein distance over normalized words divided by
/// the reference length.
pub fn wer(ref_text: &str, hyp_text: &str) -> Result<f64> {
    let r = normalize_words(ref_text);
    let h = normalize_words(hyp_text);
    if r.is_empty() {
        return Err(Error::Validation("empty reference transcript".into()));
    }
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0usize; h.len() + 1];
    for i in 1..=r.len() {
        cur[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[h.len()] as f64 / r.len() as f64)
}

/// Speech-to-text adapter used by the evaluation harness. Tests use fixed
/// outputs; a real ASR system plugs in behind this.
pub trait Transcriber {
    fn transcribe(&self, samples: &[f64], sample_rate: u32) -> Result<String>;
}

/// Transcriber that returns a fixed hypothesis regardless of audio.
pub struct FixedTranscriber(pub String);

impl Transcriber for FixedTranscriber {
    fn transcribe(&self, _samples: &[f64], _sample_rate: u32) -> Result<String> {
        Ok(self.0.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tracks(f0: &[f64]) -> ProsodyTracks {
        ProsodyTracks {
            f0_hz: f0.to_vec(),
            energy: vec![1.0; f0.len()],
            voiced: f0.iter().map(|&v| v > 0.0).collect(),
        }
    }

    #[test]
    fn identical_tracks_have_zero_ffe() {
        let t = tracks(&[120.0, 0.0, 130.0, 140.0]);
        let b = ffe(&t, &t).unwrap();
        assert_eq!(b.ffe, 0.0);
        assert_eq!(b.n_total, 4);
    }

    #[test]
    fn planted_errors_give_exactly_030() {
        // 10 frames with one U->V, one V->U, one F0E
        let reference = tracks(&[
            100.0, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0, 0.0, 0.0,
        ]);
        let estimate = tracks(&[
            100.0, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0, 0.0, 130.0, 0.0,
        ]);
        // frame 7: V->U; frame 8: U->V; make frame 0 an F0E
        let mut est = estimate;
        est.f0_hz[0] = 121.0; // ratio 1.21 > 1.2
        let b = ffe(&reference, &est).unwrap();
        assert_eq!(b.n_u_to_v, 1);
        assert_eq!(b.n_v_to_u, 1);
        assert_eq!(b.n_f0e, 1);
        assert_eq!(b.ffe, 0.30);
    }

    #[test]
    fn f0_error_threshold_is_strict() {
        let reference = tracks(&[220.0]);
        let mut est = tracks(&[264.0]); // ratio exactly 1.2
        let b = ffe(&reference, &est).unwrap();
        assert_eq!(b.n_f0e, 0);
        est.f0_hz[0] = 264.1;
        let b = ffe(&reference, &est).unwrap();
        assert_eq!(b.n_f0e, 1);
    }

    #[test]
    fn ffe_rejects_zero_frames() {
        let t = tracks(&[]);
        assert!(ffe(&t, &t).is_err());
    }

    #[test]
    fn identical_mfccs_have_zero_mcd() {
        let m = Matrix::from_elem((4, 13), 0.7);
        assert_eq!(mcd(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn unit_distance_is_the_db_constant() {
        let a = Matrix::zeros((1, 13));
        let mut b = Matrix::zeros((1, 13));
        b[(0, 0)] = 1.0;
        let v = mcd(&a, &b).unwrap();
        assert!((v - 6.1419).abs() < 1e-3);
        assert!((v - 10.0 * 2.0_f64.sqrt() / 10.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn frame_average_rule() {
        // distances 1 and 3 -> mean 2 -> 2 * constant
        let a = Matrix::zeros((2, 13));
        let mut b = Matrix::zeros((2, 13));
        b[(0, 0)] = 1.0;
        b[(1, 0)] = 3.0;
        let v = mcd(&a, &b).unwrap();
        assert!((v - 2.0 * MCD_SCALE_DB).abs() < 1e-9);
    }

    #[test]
    fn mcd_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Matrix::from_shape_fn((5, 13), |_| rng.gen_range(-3.0..3.0));
            let b = Matrix::from_shape_fn((5, 13), |_| rng.gen_range(-3.0..3.0));
            let mut acc = 0.0;
            for f in 0..5 {
                let mut d2 = 0.0;
                for j in 0..13 {
                    d2 += (a[(f, j)] - b[(f, j)]).powi(2);
                }
                acc += d2.sqrt();
            }
            let oracle = 10.0 * 2.0_f64.sqrt() / 10.0_f64.ln() * acc / 5.0;
            assert!((mcd(&a, &b).unwrap() - oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn mcd_shape_mismatch_rejected() {
        let a = Matrix::zeros((2, 13));
        let b = Matrix::zeros((3, 13));
        assert!(mcd(&a, &b).is_err());
    }

    fn toy_track() -> PhonemeTrack {
        PhonemeTrack {
            phonemes: vec!["a".into(), "b".into()],
            durations_frames: vec![2, 2],
            word_spans: vec![(0, 2)],
        }
    }

    #[test]
    fn identical_samples_have_zero_spread() {
        let s = tracks(&[100.0, 100.0, 150.0, 150.0]);
        let stats = prosody_diversity(&[s.clone(), s], &toy_track()).unwrap();
        assert_eq!(stats.f0_std_hz, 0.0);
        assert_eq!(stats.energy_std, 0.0);
    }

    #[test]
    fn two_sample_population_std_is_five() {
        let a = tracks(&[100.0, 100.0, 100.0, 100.0]);
        let b = tracks(&[110.0, 110.0, 110.0, 110.0]);
        let stats = prosody_diversity(&[a, b], &toy_track()).unwrap();
        assert_eq!(stats.f0_std_hz, 5.0);
    }

    #[test]
    fn single_sample_is_rejected() {
        let s = tracks(&[100.0, 100.0, 150.0, 150.0]);
        assert!(prosody_diversity(&[s], &toy_track()).is_err());
    }

    #[test]
    fn all_unvoiced_is_an_error() {
        let s = tracks(&[0.0, 0.0, 0.0, 0.0]);
        assert!(prosody_diversity(&[s.clone(), s], &toy_track()).is_err());
    }

    #[test]
    fn wer_basics() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert!((wer("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer("a b c", "").unwrap(), 1.0);
        assert!(wer("", "a").is_err());
        // case and punctuation are normalized away
        assert_eq!(wer("Hello, World!", "hello world").unwrap(), 0.0);
    }

    #[test]
    fn wer_matches_dp_oracle_on_random_fixtures() {
        fn oracle(r: &[String], h: &[String]) -> usize {
            let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
            for i in 0..=r.len() {
                d[i][0] = i;
            }
            for j in 0..=h.len() {
                d[0][j] = j;
            }
            for i in 1..=r.len() {
                for j in 1..=h.len() {
                    let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
                    d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
                }
            }
            d[r.len()][h.len()]
        }
        let vocab = ["cat", "dog", "sun", "moon", "star"];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let r: Vec<String> = (0..rng.gen_range(1..8))
                .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
                .collect();
            let h: Vec<String> = (0..rng.gen_range(0..8))
                .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
                .collect();
            let expect = oracle(&r, &h) as f64 / r.len() as f64;
            let got = wer(&r.join(" "), &h.join(" ")).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_invariant_under_shared_frame_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 12;
        let a = tracks(&(0..n).map(|_| rng.gen_range(80.0..300.0)).collect::<Vec<_>>());
        let b = tracks(&(0..n).map(|_| rng.gen_range(80.0..300.0)).collect::<Vec<_>>());
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let apply = |t: &ProsodyTracks| ProsodyTracks {
            f0_hz: perm.iter().map(|&i| t.f0_hz[i]).collect(),
            energy: perm.iter().map(|&i| t.energy[i]).collect(),
            voiced: perm.iter().map(|&i| t.voiced[i]).collect(),
        };
        let before = ffe(&a, &b).unwrap();
        let after = ffe(&apply(&a), &apply(&b)).unwrap();
        assert_eq!(before, after);
    }
}
