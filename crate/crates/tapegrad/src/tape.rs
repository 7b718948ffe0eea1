//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are dense `f64` matrices. A forward pass appends nodes to the
//! tape; [`Tape::backward`] walks it in reverse and accumulates gradients
//! for every node reachable from the loss. Parameters are registered by
//! name so callers can map gradients back onto their weight stores.
//!
//! Everything is deterministic: identical inputs produce bit-identical
//! outputs, which the checkpoint round-trip contract relies on.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

/// Dense matrix type used throughout the engine.
pub type Matrix = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by the parameter name passed to [`Tape::param`].
pub type Grads = HashMap<String, Matrix>;

enum Op {
    Leaf,
    Add(Var, Var),
    /// `[n x d] + [1 x d]`, row broadcast.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// `A . B^T`
    MatMulNT(Var, Var),
    Exp(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // cached per-row (mean, inv_std)
        stats: Vec<(f64, f64)>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        spans: Vec<(usize, usize)>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        end: usize,
    },
    /// Elementwise multiply by a fixed mask (already scaled by 1/keep).
    Dropout {
        x: Var,
        mask: Matrix,
    },
    SumAll(Var),
    MeanAll(Var),
    /// Frame-weighted mean absolute error against a fixed target.
    /// value = (1/n_frames) * sum_f w_f * mean_b |pred_fb - target_fb|
    FrameMae {
        pred: Var,
        target: Matrix,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// A single forward computation. Build one per training step or inference
/// call; weights live outside the tape and are copied in via [`Tape::param`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1 x 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    /// Insert a constant leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Insert (or fetch) a named trainable parameter. Registering the same
    /// name twice returns the original node so shared weights accumulate
    /// gradients correctly.
    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    /// `[n x d] + [1 x d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = &self.nodes[row.0].value;
        assert_eq!(r.nrows(), 1, "add_row expects a [1 x d] rhs");
        let v = &self.nodes[a.0].value + r;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// `A . B^T` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(y, Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        assert_eq!(g.nrows(), 1);
        assert_eq!(b.nrows(), 1);
        assert_eq!(g.ncols(), xv.ncols());
        let d = xv.ncols() as f64;
        let mut y = xv.clone();
        let mut stats = Vec::with_capacity(xv.nrows());
        for mut row in y.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv_std));
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        )
    }

    /// 1-D convolution along the row (time) axis with zero same-padding.
    ///
    /// `x` is `[t x c_in]`, `w` is `[(kernel*c_in) x c_out]` with tap `dt`
    /// and input channel `ci` at row `dt*c_in + ci`, `b` is `[1 x c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "conv1d kernel must be odd");
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (t, c_in) = xv.dim();
        let c_out = wv.ncols();
        assert_eq!(wv.nrows(), kernel * c_in, "conv1d weight shape mismatch");
        assert_eq!(bv.dim(), (1, c_out), "conv1d bias shape mismatch");
        let pad = kernel / 2;
        let mut y = Matrix::zeros((t, c_out));
        for ti in 0..t {
            for co in 0..c_out {
                let mut acc = bv[(0, co)];
                for dt in 0..kernel {
                    let src = ti as isize + dt as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ci in 0..c_in {
                        acc += wv[(dt * c_in + ci, co)] * xv[(src, ci)];
                    }
                }
                y[(ti, co)] = acc;
            }
        }
        self.push(y, Op::Conv1d { x, w, b, kernel })
    }

    /// Select rows by index; duplicates allowed (used for embedding lookup
    /// and the length regulator).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols();
        let mut y = Matrix::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            y.row_mut(r).assign(&xv.row(i));
        }
        self.push(
            y,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Mean over each row span `[start, end)`; empty spans yield zero rows.
    pub fn segment_mean(&mut self, x: Var, spans: &[(usize, usize)]) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols();
        let mut y = Matrix::zeros((spans.len(), d));
        for (r, &(a, b)) in spans.iter().enumerate() {
            assert!(a <= b && b <= xv.nrows(), "segment out of range");
            if a == b {
                continue;
            }
            let inv = 1.0 / (b - a) as f64;
            for j in 0..d {
                let mut acc = 0.0;
                for i in a..b {
                    acc += xv[(i, j)];
                }
                y[(r, j)] = acc * inv;
            }
        }
        self.push(
            y,
            Op::SegmentMean {
                x,
                spans: spans.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = concatenate![
            Axis(1),
            self.nodes[a.0].value.view(),
            self.nodes[b.0].value.view()
        ];
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[x.0].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[x.0].value.slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start, end })
    }

    /// Multiply by a precomputed dropout mask whose kept entries are
    /// `1/keep_prob` and dropped entries are zero.
    pub fn dropout(&mut self, x: Var, mask: Matrix) -> Var {
        assert_eq!(mask.dim(), self.nodes[x.0].value.dim());
        let v = &self.nodes[x.0].value * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Matrix::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let s = m.sum() / m.len() as f64;
        self.push(Matrix::from_elem((1, 1), s), Op::MeanAll(a))
    }

    /// Frame-weighted MAE: frames are rows, the per-frame error is the mean
    /// absolute difference over columns, and the result is
    /// `sum_f w_f * err_f / n_frames`.
    pub fn frame_mae(&mut self, pred: Var, target: &Matrix, weights: &[f64]) -> Var {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.dim(), target.dim(), "frame_mae shape mismatch");
        assert_eq!(p.nrows(), weights.len(), "frame_mae weights length");
        let n_frames = p.nrows() as f64;
        let n_bins = p.ncols() as f64;
        let mut total = 0.0;
        for (f, w) in weights.iter().enumerate() {
            let mut err = 0.0;
            for j in 0..p.ncols() {
                err += (p[(f, j)] - target[(f, j)]).abs();
            }
            total += w * err / n_bins;
        }
        let v = Matrix::from_elem((1, 1), total / n_frames);
        self.push(
            v,
            Op::FrameMae {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// named parameter that participated in the computation.
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward() needs a scalar loss"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // split borrows: gradient sinks are always earlier nodes
            macro_rules! acc {
                ($v:expr, $delta:expr) => {{
                    let idx = $v.0;
                    let delta = $delta;
                    match &mut grads[idx] {
                        Some(existing) => *existing += &delta,
                        slot => *slot = Some(delta),
                    }
                }};
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, g.clone());
                    acc!(b, g);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let mut rg = Matrix::zeros((1, g.ncols()));
                    for r in g.rows() {
                        for (j, v) in r.iter().enumerate() {
                            rg[(0, j)] += v;
                        }
                    }
                    acc!(a, g);
                    acc!(row, rg);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, g.clone());
                    acc!(b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    acc!(a, ga);
                    acc!(b, gb);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    acc!(a, g.mapv(|v| v * c));
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    acc!(a, g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    acc!(a, ga);
                    acc!(b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b.0].value);
                    let gb = g.t().dot(&self.nodes[a.0].value);
                    acc!(a, ga);
                    acc!(b, gb);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let ga = &g * &self.nodes[i].value;
                    acc!(a, ga);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[a.0].value, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    acc!(a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let mut ga = Matrix::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let mut dot = 0.0;
                        for j in 0..y.ncols() {
                            dot += g[(r, j)] * y[(r, j)];
                        }
                        for j in 0..y.ncols() {
                            ga[(r, j)] = y[(r, j)] * (g[(r, j)] - dot);
                        }
                    }
                    acc!(a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let (t, d) = xv.dim();
                    let df = d as f64;
                    let mut gx = Matrix::zeros((t, d));
                    let mut gg = Matrix::zeros((1, d));
                    let mut gb = Matrix::zeros((1, d));
                    for r in 0..t {
                        let (mean, inv_std) = stats[r];
                        // recompute xhat for the row
                        let mut sum_gxh = 0.0;
                        let mut sum_gxh_xh = 0.0;
                        let mut gxh = vec![0.0; d];
                        let mut xh = vec![0.0; d];
                        for j in 0..d {
                            xh[j] = (xv[(r, j)] - mean) * inv_std;
                            gxh[j] = g[(r, j)] * gv[(0, j)];
                            sum_gxh += gxh[j];
                            sum_gxh_xh += gxh[j] * xh[j];
                            gg[(0, j)] += g[(r, j)] * xh[j];
                            gb[(0, j)] += g[(r, j)];
                        }
                        for j in 0..d {
                            gx[(r, j)] =
                                inv_std * (gxh[j] - sum_gxh / df - xh[j] * sum_gxh_xh / df);
                        }
                    }
                    acc!(x, gx);
                    acc!(gamma, gg);
                    acc!(beta, gb);
                }
                Op::Conv1d { x, w, b, kernel } => {
                    let (x, w, b, kernel) = (*x, *w, *b, *kernel);
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (t, c_in) = xv.dim();
                    let c_out = wv.ncols();
                    let pad = kernel / 2;
                    let mut gx = Matrix::zeros((t, c_in));
                    let mut gw = Matrix::zeros((kernel * c_in, c_out));
                    let mut gb = Matrix::zeros((1, c_out));
                    for ti in 0..t {
                        for co in 0..c_out {
                            let go = g[(ti, co)];
                            if go == 0.0 {
                                continue;
                            }
                            gb[(0, co)] += go;
                            for dt in 0..kernel {
                                let src = ti as isize + dt as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for ci in 0..c_in {
                                    gw[(dt * c_in + ci, co)] += go * xv[(src, ci)];
                                    gx[(src, ci)] += go * wv[(dt * c_in + ci, co)];
                                }
                            }
                        }
                    }
                    acc!(x, gx);
                    acc!(w, gw);
                    acc!(b, gb);
                }
                Op::GatherRows { x, idx } => {
                    let x = *x;
                    let idx = idx.clone();
                    let mut gx = Matrix::zeros(self.nodes[x.0].value.dim());
                    for (r, &i2) in idx.iter().enumerate() {
                        for j in 0..g.ncols() {
                            gx[(i2, j)] += g[(r, j)];
                        }
                    }
                    acc!(x, gx);
                }
                Op::SegmentMean { x, spans } => {
                    let x = *x;
                    let spans = spans.clone();
                    let mut gx = Matrix::zeros(self.nodes[x.0].value.dim());
                    for (r, &(a, b)) in spans.iter().enumerate() {
                        if a == b {
                            continue;
                        }
                        let inv = 1.0 / (b - a) as f64;
                        for i2 in a..b {
                            for j in 0..g.ncols() {
                                gx[(i2, j)] += g[(r, j)] * inv;
                            }
                        }
                    }
                    acc!(x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = self.nodes[a.0].value.ncols();
                    let ga = g.slice(s![.., ..da]).to_owned();
                    let gb = g.slice(s![.., da..]).to_owned();
                    acc!(a, ga);
                    acc!(b, gb);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut row = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let gp = g.slice(s![row..row + rows, ..]).to_owned();
                        row += rows;
                        acc!(p, gp);
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let (x, start, end) = (*x, *start, *end);
                    let mut gx = Matrix::zeros(self.nodes[x.0].value.dim());
                    gx.slice_mut(s![.., start..end]).assign(&g);
                    acc!(x, gx);
                }
                Op::SliceRows { x, start, end } => {
                    let (x, start, end) = (*x, *start, *end);
                    let mut gx = Matrix::zeros(self.nodes[x.0].value.dim());
                    gx.slice_mut(s![start..end, ..]).assign(&g);
                    acc!(x, gx);
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let ga = &g * mask;
                    acc!(x, ga);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let ga = Matrix::from_elem(self.nodes[a.0].value.dim(), g[(0, 0)]);
                    acc!(a, ga);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let len = self.nodes[a.0].value.len() as f64;
                    let ga = Matrix::from_elem(self.nodes[a.0].value.dim(), g[(0, 0)] / len);
                    acc!(a, ga);
                }
                Op::FrameMae {
                    pred,
                    target,
                    weights,
                } => {
                    let pred = *pred;
                    let p = &self.nodes[pred.0].value;
                    let n_frames = p.nrows() as f64;
                    let n_bins = p.ncols() as f64;
                    let scale = g[(0, 0)] / (n_frames * n_bins);
                    let mut gp = Matrix::zeros(p.dim());
                    for f in 0..p.nrows() {
                        for j in 0..p.ncols() {
                            let d = p[(f, j)] - target[(f, j)];
                            gp[(f, j)] = scale * weights[f] * d.signum() * (d != 0.0) as u8 as f64;
                        }
                    }
                    acc!(pred, gp);
                }
            }
        }

        let mut out = Grads::new();
        for (name, var) in &self.params {
            if let Some(g) = &grads[var.0] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
