//! Run configuration: a single TOML document covering audio analysis,
//! model sizes, training hyperparameters, and paths. Every ablation in the
//! evaluation protocol is a config delta.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextEncoderKind {
    /// Deterministic hashed bag-of-words lookup, frozen. Hermetic default.
    Stub,
    /// Pair-level sentence embeddings loaded from a JSON-lines cache.
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_blocks: usize,
    pub n_heads: usize,
    pub fusion_heads: usize,
    pub ffn_hidden: usize,
    pub ffn_kernel: usize,
    pub dur_kernel: usize,
    pub smooth_kernel: usize,
    pub latent_dim: usize,
    pub context_l: usize,
    pub d_ctx: usize,
    pub dropout: f64,
    pub context_encoder: ContextEncoderKind,
    /// Ablation switch: fix the latent prior to N(0, 1) instead of the
    /// utterance-specific prior (fine-grained VAE baseline).
    pub standard_prior: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_enc_layers: 4,
            n_dec_blocks: 4,
            n_heads: 2,
            fusion_heads: 8,
            ffn_hidden: 1024,
            ffn_kernel: 9,
            dur_kernel: 3,
            smooth_kernel: 5,
            latent_dim: 2,
            context_l: 1,
            d_ctx: 768,
            dropout: 0.1,
            context_encoder: ContextEncoderKind::Stub,
            standard_prior: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight on the posterior/prior KL term.
    pub beta1: f64,
    /// Weight on the prior/standard-Gaussian KL term.
    pub beta2: f64,
    /// Loss ratio of masked to unmasked frames in editing mode.
    pub lambda_mask: f64,
    /// Fraction of frames the training mask aims to cover.
    pub mask_rate: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of total steps over which the KL weights ramp from 0 to 1.
    pub kl_warmup_frac: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            lambda_mask: 1.5,
            mask_rate: 0.5,
            lr: 1e-3,
            steps: 200,
            batch_size: 4,
            seed: 42,
            kl_warmup_frac: 0.2,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    /// Run directory: checkpoints, feature cache, traces, and outputs all
    /// live under here.
    pub checkpoint_dir: PathBuf,
    /// Sentence-embedding cache for the `cache` context encoder.
    pub embedding_cache: Option<PathBuf>,
    /// Optional lexicon file overriding the builtin one.
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        let m = &self.model;
        if m.latent_dim != 2 {
            return Err(Error::Validation(
                "latent_dim is fixed at 2 per phoneme".into(),
            ));
        }
        if m.d_model % 2 != 0 {
            return Err(Error::Validation(
                "d_model must be even for sinusoidal positions".into(),
            ));
        }
        if m.d_model % m.n_heads != 0 || m.d_model % m.fusion_heads != 0 {
            return Err(Error::Validation(
                "d_model must be divisible by both head counts".into(),
            ));
        }
        for (name, k) in [
            ("ffn_kernel", m.ffn_kernel),
            ("dur_kernel", m.dur_kernel),
            ("smooth_kernel", m.smooth_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Validation(format!("{name} must be odd")));
            }
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Validation("dropout must be in [0, 1)".into()));
        }
        if m.context_encoder == ContextEncoderKind::Cache
            && self.paths.embedding_cache.is_none()
        {
            return Err(Error::Validation(
                "the cache context encoder needs paths.embedding_cache".into(),
            ));
        }
        let t = &self.train;
        if !(t.mask_rate > 0.0 && t.mask_rate < 1.0) {
            return Err(Error::Validation("mask_rate must be in (0, 1)".into()));
        }
        if t.lambda_mask < 0.0 {
            return Err(Error::Validation("lambda_mask must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&t.kl_warmup_frac) {
            return Err(Error::Validation("kl_warmup_frac must be in [0, 1]".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Stable digest of the whole configuration, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("config serialization: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
