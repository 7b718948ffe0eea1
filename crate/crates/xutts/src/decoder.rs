//! Acoustic decoder: latent injection, length regulation, and the
//! feed-forward Transformer stack that emits 80-band log-mel frames.

use rand::Rng;

use tapegrad::nn::{sinusoidal_positions, FftBlock, HasParams, Linear};
use tapegrad::{Matrix, Tape, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::vae::LATENT_DIM;

pub struct AcousticDecoder {
    pub z_proj: Linear,
    pub blocks: Vec<FftBlock>,
    pub out: Linear,
    pub d_model: usize,
    pub n_mels: usize,
}

impl AcousticDecoder {
    pub fn new<R: Rng>(cfg: &ModelConfig, n_mels: usize, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.n_dec_blocks)
            .map(|i| {
                FftBlock::new(
                    &format!("decoder.block.{i}"),
                    d,
                    cfg.n_heads,
                    cfg.ffn_hidden,
                    cfg.ffn_kernel,
                    rng,
                )
            })
            .collect();
        Self {
            z_proj: Linear::new("decoder.z_proj", LATENT_DIM, d, false, rng),
            blocks,
            out: Linear::new("decoder.out", d, n_mels, true, rng),
            d_model: d,
            n_mels,
        }
    }

    /// `out = H + z W_up`, lifting the 2-dim latent into the model space.
    pub fn inject_latent(&self, t: &mut Tape, h: Var, z: Var) -> Result<Var> {
        let (hr, zr) = (t.value(h).nrows(), t.value(z).nrows());
        if hr != zr {
            return Err(Error::Shape(format!(
                "H has {hr} rows but z has {zr}"
            )));
        }
        if t.value(z).ncols() != LATENT_DIM {
            return Err(Error::Shape(format!(
                "latent width {} (expected {LATENT_DIM})",
                t.value(z).ncols()
            )));
        }
        let up = self.z_proj.forward(t, z);
        Ok(t.add(h, up))
    }

    /// Decode length-regulated frames into a mel matrix. Sinusoidal
    /// positions are re-applied at frame level before the blocks.
    pub fn decode(&self, t: &mut Tape, frames: Var) -> Result<Var> {
        let n = t.value(frames).nrows();
        if n == 0 {
            return Err(Error::Validation("cannot decode zero frames".into()));
        }
        let pe = t.constant(sinusoidal_positions(n, self.d_model));
        let mut x = t.add(frames, pe);
        for b in &self.blocks {
            x = b.forward(t, x);
        }
        Ok(self.out.forward(t, x))
    }
}

impl HasParams for AcousticDecoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.z_proj.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.z_proj.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.out.visit_mut(f);
    }
}

/// Frame-to-phoneme ownership for the length regulator: row `t` of the
/// output is row `owner[t]` of the input.
pub fn length_regulate_indices(durations: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(durations.iter().sum());
    for (p, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            idx.push(p);
        }
    }
    idx
}

/// Repeat row `t` of `seq` `durations[t]` times, preserving order.
pub fn length_regulate(seq: &Matrix, durations: &[usize]) -> Result<Matrix> {
    if seq.nrows() != durations.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} durations",
            seq.nrows(),
            durations.len()
        )));
    }
    let idx = length_regulate_indices(durations);
    let mut out = Matrix::zeros((idx.len(), seq.ncols()));
    for (r, &p) in idx.iter().enumerate() {
        out.row_mut(r).assign(&seq.row(p));
    }
    Ok(out)
}

/// Tape version of the length regulator.
pub fn length_regulate_var(t: &mut Tape, seq: Var, durations: &[usize]) -> Result<Var> {
    if t.value(seq).nrows() != durations.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} durations",
            t.value(seq).nrows(),
            durations.len()
        )));
    }
    let idx = length_regulate_indices(durations);
    Ok(t.gather_rows(seq, &idx))
}
