//! Dataset assembly and the training loop.
//!
//! Reproducibility contract: one RNG per concern, all derived from the
//! config seed (weight init = seed, latent noise = seed + 1, mask
//! sampling = seed + 2, dropout = seed + 3), and batches walk the train
//! split cyclically in manifest order. Identical config and seed give an
//! identical loss trace.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tapegrad::optim::Adam;
use tapegrad::{Matrix, Tape};

use crate::audio::read_mel;
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::corpus::{build_context_window, load_alignment, load_manifest, reconcile_frames,
                    PhonemeTrack, Split};
use crate::editing::{biased_frame_weights, sample_training_mask, EditPlan};
use crate::embedding::{build_pairs, ContextEncoder, TrainNoise};
use crate::error::{Error, Result};
use crate::model::{ForwardItem, LossParts, TtsModel};
use crate::vae::LATENT_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Tts,
    /// Masked editing objective with the biased loss ratio from the config.
    Se,
    /// Masked editing objective with strictly uniform frame weights; the
    /// comparison arm for the biased-loss equivalence check.
    SeUniform,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Tts => "tts",
            TrainMode::Se => "se",
            TrainMode::SeUniform => "se-uniform",
        }
    }
}

/// One utterance ready for training.
pub struct TrainItem {
    pub id: String,
    pub phoneme_ids: Vec<usize>,
    pub speaker_idx: usize,
    pub track: PhonemeTrack,
    pub mel: Matrix,
    pub context: Matrix,
    pub plan: Option<EditPlan>,
}

pub struct Dataset {
    pub items: Vec<TrainItem>,
    pub phoneme_vocab: Vec<String>,
    pub speaker_vocab: Vec<String>,
}

/// Feature-cache directory under the run directory.
pub fn features_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("features")
}

pub fn mel_cache_path(cfg: &RunConfig, id: &str) -> PathBuf {
    features_dir(cfg).join(format!("{id}.mel"))
}

/// Build vocabularies and training items from the manifest and the
/// prepared feature cache. Neighbor windows come from manifest order.
pub fn build_dataset(cfg: &RunConfig, encoder: &dyn ContextEncoder,
                     mode: TrainMode) -> Result<Dataset> {
    let manifest = load_manifest(&cfg.paths.manifest)?;
    let fps = cfg.audio.fps();

    // vocabularies over the whole corpus, deterministic order, OOV first
    let mut phoneme_set = std::collections::BTreeSet::new();
    let mut speaker_set = std::collections::BTreeSet::new();
    let mut tracks: HashMap<String, PhonemeTrack> = HashMap::new();
    for e in &manifest.entries {
        let track = load_alignment(&e.alignment, fps)?;
        for p in &track.phonemes {
            phoneme_set.insert(p.clone());
        }
        speaker_set.insert(e.speaker.clone());
        tracks.insert(e.id.clone(), track);
    }
    let mut phoneme_vocab = vec!["<oov>".to_string()];
    phoneme_vocab.extend(phoneme_set);
    let mut speaker_vocab = vec!["<oov>".to_string()];
    speaker_vocab.extend(speaker_set);
    let phoneme_index: HashMap<&str, usize> = phoneme_vocab
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let speaker_index: HashMap<&str, usize> = speaker_vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mask_seed = cfg.train.seed.wrapping_add(2);
    let mut items = Vec::new();
    for (idx, e) in manifest.entries.iter().enumerate() {
        if e.split != Split::Train {
            continue;
        }
        let mut track = tracks.remove(&e.id).expect("track loaded above");
        let mel = read_mel(&mel_cache_path(cfg, &e.id), &cfg.audio)?;
        reconcile_frames(&mut track, mel.n_frames())?;
        let utt = build_context_window(&manifest.entries, idx, cfg.model.context_l);
        let context = encoder.encode_pairs(&build_pairs(&utt))?;
        let plan = match mode {
            TrainMode::Tts => None,
            TrainMode::Se | TrainMode::SeUniform => {
                Some(sample_training_mask(&track, cfg.train.mask_rate, mask_seed)?)
            }
        };
        items.push(TrainItem {
            id: e.id.clone(),
            phoneme_ids: track
                .phonemes
                .iter()
                .map(|p| *phoneme_index.get(p.as_str()).unwrap_or(&0))
                .collect(),
            speaker_idx: *speaker_index.get(e.speaker.as_str()).unwrap_or(&0),
            track,
            mel: mel.frames,
            context,
            plan,
        });
    }
    if items.is_empty() {
        return Err(Error::Validation(
            "no utterances in the train split".into(),
        ));
    }
    Ok(Dataset {
        items,
        phoneme_vocab,
        speaker_vocab,
    })
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct StepLog {
    pub step: usize,
    pub recon: f64,
    pub kl1: f64,
    pub kl2: f64,
    pub dur: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: TtsModel,
    pub optimizer: Adam,
    pub trace: Vec<StepLog>,
    pub final_checkpoint: Option<PathBuf>,
}

fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// KL warm-up factor at `step` (0-based): linear ramp over the first
/// `kl_warmup_frac` of the run.
fn warmup_factor(cfg: &RunConfig, step: usize) -> f64 {
    let warm = (cfg.train.kl_warmup_frac * cfg.train.steps as f64).round() as usize;
    if warm == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warm as f64).min(1.0)
    }
}

/// Run the training loop. Checkpoints land under
/// `<checkpoint_dir>/checkpoints/`; a NaN loss aborts immediately,
/// leaving the last periodic checkpoint as the newest one on disk.
pub fn train(cfg: &RunConfig, mode: TrainMode, dataset: &Dataset,
             checkpoint_root: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = TtsModel::new(
        &cfg.model,
        cfg.audio.n_mels,
        dataset.phoneme_vocab.clone(),
        dataset.speaker_vocab.clone(),
        cfg.train.seed,
    )?;
    let mut optimizer = Adam::new(cfg.train.lr);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(3));
    let n = dataset.items.len();
    let batch = cfg.train.batch_size.min(n);
    let mut trace = Vec::with_capacity(cfg.train.steps);
    let mut final_checkpoint = None;

    for step in 0..cfg.train.steps {
        let w = warmup_factor(cfg, step);
        let beta1 = cfg.train.beta1 * w;
        let beta2 = cfg.train.beta2 * w;
        let mut tape = Tape::new();
        let mut sum = None;
        let mut parts_acc = LossParts {
            total: 0.0,
            recon: 0.0,
            kl1: 0.0,
            kl2: 0.0,
            dur: 0.0,
        };
        for k in 0..batch {
            let item = &dataset.items[(step * batch + k) % n];
            let eps = standard_normal(item.track.len(), LATENT_DIM, &mut noise_rng);
            let fwd_item = ForwardItem {
                phoneme_ids: &item.phoneme_ids,
                speaker_idx: item.speaker_idx,
                context: &item.context,
                durations: &item.track.durations_frames,
                mel: &item.mel,
            };
            let mut noise = TrainNoise {
                rng: &mut dropout_rng,
                dropout: cfg.model.dropout,
            };
            let loss = match mode {
                TrainMode::Tts => model.train_forward_tts(
                    &mut tape,
                    &fwd_item,
                    &eps,
                    beta1,
                    beta2,
                    Some(&mut noise),
                )?,
                TrainMode::Se | TrainMode::SeUniform => {
                    let plan = item.plan.as_ref().ok_or_else(|| {
                        Error::Validation("dataset was built without mask plans".into())
                    })?;
                    let weights = if mode == TrainMode::Se {
                        biased_frame_weights(plan, cfg.train.lambda_mask)?
                    } else {
                        vec![1.0; item.mel.nrows()]
                    };
                    model.train_forward_se(
                        &mut tape,
                        &fwd_item,
                        plan,
                        &eps,
                        beta1,
                        beta2,
                        &weights,
                        Some(&mut noise),
                    )?
                }
            };
            let p = loss.parts(&tape);
            parts_acc.total += p.total;
            parts_acc.recon += p.recon;
            parts_acc.kl1 += p.kl1;
            parts_acc.kl2 += p.kl2;
            parts_acc.dur += p.dur;
            sum = Some(match sum {
                None => loss.total,
                Some(s) => tape.add(s, loss.total),
            });
        }
        let inv = 1.0 / batch as f64;
        let batch_total = tape.scale(sum.expect("batch is non-empty"), inv);
        let total_value = tape.scalar(batch_total);
        let log = StepLog {
            step,
            recon: parts_acc.recon * inv,
            kl1: parts_acc.kl1 * inv,
            kl2: parts_acc.kl2 * inv,
            dur: parts_acc.dur * inv,
            total: total_value,
        };
        if !total_value.is_finite() {
            return Err(Error::TrainAbort {
                step,
                message: format!(
                    "non-finite loss {total_value}; last periodic checkpoint retained"
                ),
            });
        }
        let grads = tape.backward(batch_total);
        optimizer.step(&mut model, &grads);
        if log.step % 50 == 0 || log.step + 1 == cfg.train.steps {
            log::info!(
                "step {} total {:.4} recon {:.4} kl1 {:.4} kl2 {:.4} dur {:.4}",
                log.step, log.total, log.recon, log.kl1, log.kl2, log.dur
            );
        }
        trace.push(log);

        if let Some(root) = checkpoint_root {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 {
                let path = root.join(format!("step{:06}.ckpt", step + 1));
                save_checkpoint(&path, &model, &optimizer, step + 1, cfg)?;
            }
        }
    }
    if let Some(root) = checkpoint_root {
        let path = root.join(format!("final-{}.ckpt", mode.as_str()));
        save_checkpoint(&path, &model, &optimizer, cfg.train.steps, cfg)?;
        final_checkpoint = Some(path);
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        trace,
        final_checkpoint,
    })
}
