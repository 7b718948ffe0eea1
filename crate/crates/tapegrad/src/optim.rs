//! Adam optimizer over named parameters.

use std::collections::HashMap;

use crate::nn::HasParams;
use crate::tape::{Grads, Matrix};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: HashMap<String, Matrix>,
    pub v: HashMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, model: &mut impl HasParams, grads: &Grads) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        model.visit_mut(&mut |name, w| {
            let g = match grads.get(name) {
                Some(g) => g,
                None => return,
            };
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(w.dim()));
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(w.dim()));
            for ((wi, gi), (mi, vi)) in w
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
