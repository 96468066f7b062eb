//! Adam with global-norm gradient clipping.

use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

pub fn global_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    libm::sqrt(grads.iter().map(|(_, g)| g.sum_sq()).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    counts: Vec<u64>,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            counts: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    ///
    /// Bias correction uses a per-parameter step count, so modules that
    /// start training late (after warm-up) get a fresh correction.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
            self.counts.resize(store.len(), 0);
        }
        self.step += 1;
        for (id, g) in grads {
            let i = id.index();
            self.counts[i] += 1;
            let t = self.counts[i] as f64;
            let c1 = 1.0 - libm::pow(self.beta1, t);
            let c2 = 1.0 - libm::pow(self.beta2, t);
            let (r, c) = g.shape();
            let m = self.first[i].get_or_insert_with(|| Matrix::zeros(r, c));
            let v = self.second[i].get_or_insert_with(|| Matrix::zeros(r, c));
            let p = store.get_mut(*id);
            for (((pv, mv), vv), gv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}
