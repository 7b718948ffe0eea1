//! Cross-utterance embedding: phoneme/speaker encoding, neighbor-pair
//! context vectors, multi-head fusion, and the duration predictor.
//!
//! The context encoder is pluggable. The default is a frozen hashed
//! bag-of-words lookup so the whole pipeline stays hermetic; the cache
//! adapter loads precomputed pair-level sentence embeddings instead.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use tapegrad::nn::{
    dropout_mask, gaussian, sinusoidal_positions, Conv1d, Embedding, FftBlock, HasParams,
    LayerNorm, Linear, MultiHeadAttention,
};
use tapegrad::{Matrix, Tape, Var};

use crate::config::{hex, ModelConfig};
use crate::corpus::Utterance;
use crate::error::{Error, Result};

/// Maps one cross-utterance pair text to a fixed-dimension vector.
/// Implementations must be deterministic; the empty string maps to a
/// dedicated constant vector.
pub trait ContextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, pair_text: &str) -> Result<Vec<f64>>;

    /// Stack pair encodings into a `[2l x d_ctx]` matrix.
    fn encode_pairs(&self, pairs: &[String]) -> Result<Matrix> {
        let mut m = Matrix::zeros((pairs.len(), self.dim()));
        for (i, p) in pairs.iter().enumerate() {
            let v = self.encode(p)?;
            if v.len() != self.dim() {
                return Err(Error::Shape(format!(
                    "context vector of length {} from a {}-dim encoder",
                    v.len(),
                    self.dim()
                )));
            }
            for (j, x) in v.iter().enumerate() {
                m[(i, j)] = *x;
            }
        }
        Ok(m)
    }
}

const BOW_BUCKETS: usize = 4096;

fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Frozen hashed bag-of-words encoder: every token hashes into a bucket of
/// a fixed Gaussian table and the pair embedding is the token average.
pub struct HashedBowEncoder {
    dim: usize,
    table: Matrix,
    empty_row: Vec<f64>,
}

impl HashedBowEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = gaussian(BOW_BUCKETS, dim, 1.0, &mut rng);
        let empty_row = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            dim,
            table,
            empty_row,
        }
    }
}

impl ContextEncoder for HashedBowEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, pair_text: &str) -> Result<Vec<f64>> {
        let tokens: Vec<&str> = pair_text.split_whitespace().collect();
        if tokens.is_empty() {
            return Ok(self.empty_row.clone());
        }
        let mut acc = vec![0.0; self.dim];
        for tok in &tokens {
            let row = (fnv1a(&tok.to_lowercase()) % BOW_BUCKETS as u64) as usize;
            for j in 0..self.dim {
                acc[j] += self.table[(row, j)];
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    }
}

/// Adapter over a JSON-lines cache of pair-level sentence embeddings:
/// `{"pair_text_sha256": "...", "vector": [..]}` per line.
pub struct CachedEncoder {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl CachedEncoder {
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Line {
            pair_text_sha256: String,
            vector: Vec<f64>,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
            if l.vector.len() != dim {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("vector has {} dims, expected {dim}", l.vector.len()),
                ));
            }
            vectors.insert(l.pair_text_sha256, l.vector);
        }
        Ok(Self { dim, vectors })
    }
}

pub fn pair_text_sha256(pair_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(pair_text.as_bytes());
    hex(&h.finalize())
}

impl ContextEncoder for CachedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, pair_text: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(&pair_text_sha256(pair_text))
            .cloned()
            .ok_or_else(|| {
                Error::Validation(format!(
                    "embedding cache has no entry for pair text {:?}",
                    pair_text
                ))
            })
    }
}

/// Adjacent-pair texts over the `2l+1` window, left to right:
/// `[CLS] u_k [SEP] u_{k+1}` for each consecutive pair.
pub fn build_pairs(utt: &Utterance) -> Vec<String> {
    let l = utt.neighbors_before.len();
    debug_assert_eq!(l, utt.neighbors_after.len());
    let mut window: Vec<&str> = Vec::with_capacity(2 * l + 1);
    window.extend(utt.neighbors_before.iter().map(String::as_str));
    window.push(utt.text.as_str());
    window.extend(utt.neighbors_after.iter().map(String::as_str));
    (0..window.len().saturating_sub(1))
        .map(|k| format!("[CLS] {} [SEP] {}", window[k], window[k + 1]))
        .collect()
}

/// Per-phoneme hidden vectors with predicted log durations, as tape nodes.
pub struct CuForward {
    /// Mixture encodings `[T x d_model]`.
    pub f: Var,
    /// Fused hidden vectors `[T x d_model]`.
    pub h: Var,
    /// Predicted `log(duration + 1)` per phoneme, `[T x 1]`.
    pub log_dur: Var,
}

/// Plain-data view of the embedding output.
pub struct CuHidden {
    pub h: Matrix,
    pub predicted_log_durations: Vec<f64>,
}

/// Optional training-time randomness for the forward pass.
pub struct TrainNoise<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub dropout: f64,
}

/// The cross-utterance embedding stack.
pub struct CuEmbedding {
    pub phoneme_emb: Embedding,
    pub speaker_emb: Embedding,
    pub encoder: Vec<FftBlock>,
    pub fusion: MultiHeadAttention,
    pub proj: Linear,
    pub dur_conv1: Conv1d,
    pub dur_ln1: LayerNorm,
    pub dur_conv2: Conv1d,
    pub dur_ln2: LayerNorm,
    pub dur_out: Linear,
    pub d_model: usize,
}

impl CuEmbedding {
    pub fn new<R: Rng>(cfg: &ModelConfig, phoneme_vocab: usize, n_speakers: usize,
                       rng: &mut R) -> Self {
        let d = cfg.d_model;
        let encoder = (0..cfg.n_enc_layers)
            .map(|i| {
                FftBlock::new(
                    &format!("embedding.encoder.{i}"),
                    d,
                    cfg.n_heads,
                    cfg.ffn_hidden,
                    cfg.ffn_kernel,
                    rng,
                )
            })
            .collect();
        Self {
            phoneme_emb: Embedding::new("embedding.phoneme", phoneme_vocab, d, rng),
            speaker_emb: Embedding::new("embedding.speaker", n_speakers, d, rng),
            encoder,
            fusion: MultiHeadAttention::new("embedding.fusion", d, cfg.d_ctx, d,
                                            cfg.fusion_heads, rng),
            proj: Linear::new("embedding.proj", 2 * d, d, false, rng),
            dur_conv1: Conv1d::new("embedding.dur.conv1", d, d, cfg.dur_kernel, rng),
            dur_ln1: LayerNorm::new("embedding.dur.ln1", d),
            dur_conv2: Conv1d::new("embedding.dur.conv2", d, d, cfg.dur_kernel, rng),
            dur_ln2: LayerNorm::new("embedding.dur.ln2", d),
            dur_out: Linear::new("embedding.dur.out", d, 1, true, rng),
            d_model: d,
        }
    }

    /// Mixture encodings: Transformer over phoneme embeddings with
    /// sinusoidal positions, plus the speaker row added to every phoneme.
    pub fn encode_phonemes(&self, t: &mut Tape, phoneme_ids: &[usize],
                           speaker_id: usize) -> Result<Var> {
        if phoneme_ids.is_empty() {
            return Err(Error::Validation("empty phoneme sequence".into()));
        }
        let emb = self.phoneme_emb.forward(t, phoneme_ids);
        let pe = t.constant(sinusoidal_positions(phoneme_ids.len(), self.d_model));
        let mut x = t.add(emb, pe);
        for block in &self.encoder {
            x = block.forward(t, x);
        }
        let spk = self.speaker_emb.forward(t, &[speaker_id]);
        Ok(t.add_row(x, spk))
    }

    /// Merge the pair embeddings into one vector per phoneme with
    /// multi-head attention (queries from F, keys/values from B).
    /// With no context rows (l = 0) this is bypassed and G is zero.
    pub fn fuse_context(&self, t: &mut Tape, f: Var, context: &Matrix) -> Result<Var> {
        let rows = t.value(f).nrows();
        if context.nrows() == 0 {
            return Ok(t.constant(Matrix::zeros((rows, self.d_model))));
        }
        if context.ncols() != self.fusion.wk.nrows() {
            return Err(Error::Shape(format!(
                "context dim {} does not match the fusion layer ({})",
                context.ncols(),
                self.fusion.wk.nrows()
            )));
        }
        let b = t.constant(context.clone());
        Ok(self.fusion.forward(t, f, b))
    }

    /// `h_t = [g_t, f_t] W`.
    pub fn project_hidden(&self, t: &mut Tape, g: Var, f: Var) -> Result<Var> {
        if t.value(g).nrows() != t.value(f).nrows() {
            return Err(Error::Shape("G and F row counts differ".into()));
        }
        let cat = t.concat_cols(g, f);
        Ok(self.proj.forward(t, cat))
    }

    /// Two conv blocks (ReLU, layer norm, dropout) and a linear head
    /// predicting log(duration + 1) per phoneme.
    pub fn predict_durations(&self, t: &mut Tape, h: Var,
                             noise: Option<&mut TrainNoise>) -> Var {
        let dims = t.value(h).dim();
        let mut masks = None;
        if let Some(n) = noise {
            if n.dropout > 0.0 {
                masks = Some((
                    dropout_mask(dims.0, dims.1, n.dropout, n.rng),
                    dropout_mask(dims.0, dims.1, n.dropout, n.rng),
                ));
            }
        }
        let mut x = self.dur_conv1.forward(t, h);
        x = t.relu(x);
        x = self.dur_ln1.forward(t, x);
        if let Some((m1, _)) = &masks {
            x = t.dropout(x, m1.clone());
        }
        x = self.dur_conv2.forward(t, x);
        x = t.relu(x);
        x = self.dur_ln2.forward(t, x);
        if let Some((_, m2)) = &masks {
            x = t.dropout(x, m2.clone());
        }
        self.dur_out.forward(t, x)
    }

    /// Full embedding forward: F, H, and predicted log durations.
    pub fn forward(&self, t: &mut Tape, phoneme_ids: &[usize], speaker_id: usize,
                   context: &Matrix, mut noise: Option<&mut TrainNoise>) -> Result<CuForward> {
        let f = self.encode_phonemes(t, phoneme_ids, speaker_id)?;
        let g = self.fuse_context(t, f, context)?;
        let h = self.project_hidden(t, g, f)?;
        let log_dur = self.predict_durations(t, h, noise.as_deref_mut());
        Ok(CuForward { f, h, log_dur })
    }

    /// Inference wrapper returning plain matrices.
    pub fn infer(&self, phoneme_ids: &[usize], speaker_id: usize,
                 context: &Matrix) -> Result<CuHidden> {
        let mut t = Tape::new();
        let out = self.forward(&mut t, phoneme_ids, speaker_id, context, None)?;
        Ok(CuHidden {
            h: t.value(out.h).clone(),
            predicted_log_durations: t.value(out.log_dur).column(0).to_vec(),
        })
    }
}

impl HasParams for CuEmbedding {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.phoneme_emb.visit(f);
        self.speaker_emb.visit(f);
        for b in &self.encoder {
            b.visit(f);
        }
        self.fusion.visit(f);
        self.proj.visit(f);
        self.dur_conv1.visit(f);
        self.dur_ln1.visit(f);
        self.dur_conv2.visit(f);
        self.dur_ln2.visit(f);
        self.dur_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.phoneme_emb.visit_mut(f);
        self.speaker_emb.visit_mut(f);
        for b in &mut self.encoder {
            b.visit_mut(f);
        }
        self.fusion.visit_mut(f);
        self.proj.visit_mut(f);
        self.dur_conv1.visit_mut(f);
        self.dur_ln1.visit_mut(f);
        self.dur_conv2.visit_mut(f);
        self.dur_ln2.visit_mut(f);
        self.dur_out.visit_mut(f);
    }
}
