//! Neural-network layers on top of the tape.
//!
//! Layers own their weights as plain matrices and register them on a tape
//! by hierarchical name at forward time. The [`HasParams`] visitor is the
//! uniform surface used by the optimizer, checkpointing, and the
//! finite-difference checker.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::{Matrix, Tape, Var};

/// Visitor over named parameter matrices.
pub trait HasParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));
}

/// Xavier-uniform initialization.
pub fn xavier<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

/// Zero-mean Gaussian initialization.
pub fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Inverted dropout mask: kept entries are `1/keep`, dropped entries 0.
pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Matrix {
    assert!((0.0..1.0).contains(&rate));
    let keep = 1.0 - rate;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

/// Sinusoidal position table `[len x d]` (d must be even).
pub fn sinusoidal_positions(len: usize, d: usize) -> Matrix {
    assert!(d % 2 == 0, "positional dimension must be even");
    Array2::from_shape_fn((len, d), |(t, j)| {
        let i = j / 2;
        let angle = t as f64 / 10000_f64.powf(2.0 * i as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Dense layer `y = x W (+ b)`.
pub struct Linear {
    pub name: String,
    pub w: Matrix,
    pub b: Option<Matrix>,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, d_in: usize, d_out: usize,
                       bias: bool, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            w: xavier(d_in, d_out, d_in, d_out, rng),
            b: bias.then(|| Matrix::zeros((1, d_out))),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(&format!("{}.w", self.name), &self.w);
        let y = t.matmul(x, w);
        match &self.b {
            Some(b) => {
                let b = t.param(&format!("{}.b", self.name), b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

impl HasParams for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{}.w", self.name), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{}.b", self.name), b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{}.w", self.name), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{}.b", self.name), b);
        }
    }
}

/// 1-D convolution along the time axis, zero same-padding, odd kernel.
pub struct Conv1d {
    pub name: String,
    pub kernel: usize,
    pub w: Matrix,
    pub b: Matrix,
}

impl Conv1d {
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize,
                       kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1);
        Self {
            name: name.to_string(),
            kernel,
            w: xavier(kernel * c_in, c_out, kernel * c_in, c_out, rng),
            b: Matrix::zeros((1, c_out)),
        }
    }

    /// Identity-initialized square convolution: the center tap is the
    /// identity matrix, all other taps zero. Used by the edit-boundary
    /// smoother so an untrained model patches priors verbatim.
    pub fn identity(name: &str, channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1);
        let mut w = Matrix::zeros((kernel * channels, channels));
        let center = kernel / 2;
        for c in 0..channels {
            w[(center * channels + c, c)] = 1.0;
        }
        Self {
            name: name.to_string(),
            kernel,
            w,
            b: Matrix::zeros((1, channels)),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(&format!("{}.w", self.name), &self.w);
        let b = t.param(&format!("{}.b", self.name), &self.b);
        t.conv1d(x, w, b, self.kernel)
    }
}

impl HasParams for Conv1d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

/// Per-row layer norm with learned scale/shift.
pub struct LayerNorm {
    pub name: String,
    pub gamma: Matrix,
    pub beta: Matrix,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Matrix::ones((1, d)),
            beta: Matrix::zeros((1, d)),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(&format!("{}.g", self.name), &self.gamma);
        let b = t.param(&format!("{}.b", self.name), &self.beta);
        t.layer_norm(x, g, b, self.eps)
    }
}

impl HasParams for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{}.g", self.name), &self.gamma);
        f(&format!("{}.b", self.name), &self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{}.g", self.name), &mut self.gamma);
        f(&format!("{}.b", self.name), &mut self.beta);
    }
}

/// Row-lookup embedding table.
pub struct Embedding {
    pub name: String,
    pub table: Matrix,
}

impl Embedding {
    pub fn new<R: Rng>(name: &str, vocab: usize, d: usize, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            table: gaussian(vocab, d, 0.3, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, ids: &[usize]) -> Var {
        let tb = t.param(&format!("{}.table", self.name), &self.table);
        t.gather_rows(tb, ids)
    }
}

impl HasParams for Embedding {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{}.table", self.name), &self.table);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{}.table", self.name), &mut self.table);
    }
}

/// Multi-head attention. Queries come from `q_src` (`[t x d_q_in]`), keys
/// and values from `kv_src` (`[s x d_kv_in]`); output is `[t x d_model]`.
pub struct MultiHeadAttention {
    pub name: String,
    pub n_heads: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(name: &str, d_q_in: usize, d_kv_in: usize, d_model: usize,
                       n_heads: usize, rng: &mut R) -> Self {
        assert!(d_model % n_heads == 0, "d_model must divide by head count");
        Self {
            name: name.to_string(),
            n_heads,
            wq: xavier(d_q_in, d_model, d_q_in, d_model, rng),
            wk: xavier(d_kv_in, d_model, d_kv_in, d_model, rng),
            wv: xavier(d_kv_in, d_model, d_kv_in, d_model, rng),
            wo: xavier(d_model, d_model, d_model, d_model, rng),
        }
    }

    /// Returns the output and the per-head attention weight nodes
    /// (each `[t x s]`, rows summing to 1).
    pub fn forward_with_weights(&self, t: &mut Tape, q_src: Var, kv_src: Var) -> (Var, Vec<Var>) {
        let wq = t.param(&format!("{}.wq", self.name), &self.wq);
        let wk = t.param(&format!("{}.wk", self.name), &self.wk);
        let wv = t.param(&format!("{}.wv", self.name), &self.wv);
        let wo = t.param(&format!("{}.wo", self.name), &self.wo);
        let q = t.matmul(q_src, wq);
        let k = t.matmul(kv_src, wk);
        let v = t.matmul(kv_src, wv);
        let d_model = self.wq.ncols();
        let dh = d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut attns = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(q, lo, hi);
            let kh = t.slice_cols(k, lo, hi);
            let vh = t.slice_cols(v, lo, hi);
            let scores = t.matmul_nt(qh, kh);
            let scores = t.scale(scores, scale);
            let attn = t.softmax_rows(scores);
            attns.push(attn);
            heads.push(t.matmul(attn, vh));
        }
        let mut concat = heads[0];
        for &h in &heads[1..] {
            concat = t.concat_cols(concat, h);
        }
        (t.matmul(concat, wo), attns)
    }

    pub fn forward(&self, t: &mut Tape, q_src: Var, kv_src: Var) -> Var {
        self.forward_with_weights(t, q_src, kv_src).0
    }
}

impl HasParams for MultiHeadAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{}.wq", self.name), &self.wq);
        f(&format!("{}.wk", self.name), &self.wk);
        f(&format!("{}.wv", self.name), &self.wv);
        f(&format!("{}.wo", self.name), &self.wo);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{}.wq", self.name), &mut self.wq);
        f(&format!("{}.wk", self.name), &mut self.wk);
        f(&format!("{}.wv", self.name), &mut self.wv);
        f(&format!("{}.wo", self.name), &mut self.wo);
    }
}

/// Feed-forward Transformer block: self-attention and a two-layer 1-D
/// convolutional feed-forward network, each with residual + layer norm.
pub struct FftBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub ln2: LayerNorm,
}

impl FftBlock {
    pub fn new<R: Rng>(name: &str, d_model: usize, n_heads: usize, d_ff: usize,
                       kernel: usize, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d_model, d_model, d_model, n_heads, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), d_model),
            conv1: Conv1d::new(&format!("{name}.ff1"), d_model, d_ff, kernel, rng),
            conv2: Conv1d::new(&format!("{name}.ff2"), d_ff, d_model, 1, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d_model),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let a = self.attn.forward(t, x, x);
        let x = t.add(x, a);
        let x = self.ln1.forward(t, x);
        let f = self.conv1.forward(t, x);
        let f = t.relu(f);
        let f = self.conv2.forward(t, f);
        let y = t.add(x, f);
        self.ln2.forward(t, y)
    }
}

impl HasParams for FftBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.attn.visit(f);
        self.ln1.visit(f);
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.ln2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.attn.visit_mut(f);
        self.ln1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.ln2.visit_mut(f);
    }
}
