//! Central finite-difference gradient verification.
//!
//! Independent of the tape's backward pass: it only re-evaluates the loss
//! with individually perturbed weights, so it can falsify the analytic
//! gradients rather than restate them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::HasParams;
use crate::tape::Grads;

/// Add `delta` to one entry of the named parameter.
pub fn perturb(model: &mut impl HasParams, name: &str, i: usize, j: usize, delta: f64) {
    let mut found = false;
    model.visit_mut(&mut |n, w| {
        if n == name {
            w[(i, j)] += delta;
            found = true;
        }
    });
    assert!(found, "no parameter named {name}");
}

/// Worst relative error between analytic gradients and central finite
/// differences, probing up to `max_entries` randomly chosen coordinates of
/// every parameter present in `analytic`.
///
/// Relative error uses the denominator `max(|analytic| + |numeric|, 1e-6)`;
/// the floor keeps finite-difference roundoff on near-zero gradients from
/// registering as disagreement.
pub fn max_rel_error<M, F>(
    model: &mut M,
    mut loss: F,
    analytic: &Grads,
    max_entries: usize,
    h: f64,
    seed: u64,
) -> f64
where
    M: HasParams,
    F: FnMut(&M) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<&String> = analytic.keys().collect();
    names.sort();
    let mut worst = 0.0_f64;
    for name in names {
        let g = &analytic[name];
        let (rows, cols) = g.dim();
        let total = rows * cols;
        let picks: Vec<(usize, usize)> = if total <= max_entries {
            (0..total).map(|k| (k / cols, k % cols)).collect()
        } else {
            (0..max_entries)
                .map(|_| (rng.gen_range(0..rows), rng.gen_range(0..cols)))
                .collect()
        };
        for (i, j) in picks {
            perturb(model, name, i, j, h);
            let up = loss(model);
            perturb(model, name, i, j, -2.0 * h);
            let down = loss(model);
            perturb(model, name, i, j, h);
            let numeric = (up - down) / (2.0 * h);
            let a = g[(i, j)];
            let denom = (a.abs() + numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
