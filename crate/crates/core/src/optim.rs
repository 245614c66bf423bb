//! Adam, a warmup-then-linear-decay learning-rate schedule, and global-norm clipping.

use crate::params::{Gradients, GroupSet, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter in `trainable` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, trainable: GroupSet) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !trainable.contains(store.get(id).group) {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let w = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let update = (*mk / c1) / ((*vk / c2).sqrt() + self.eps);
                w.data_mut()[k] -= lr * update;
            }
        }
    }
}

/// Linear warmup from 0 over the first `warmup_steps`, then linear decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupLinear {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupLinear {
    pub fn new(base_lr: f64, warmup_proportion: f64, total_steps: u64) -> Self {
        let warmup_steps = (warmup_proportion * total_steps as f64).round() as u64;
        Self {
            base_lr,
            warmup_steps,
            total_steps: total_steps.max(1),
        }
    }

    /// Learning rate of the `step`-th update (one-based).
    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64 + 1.0;
        let span = (self.total_steps - self.warmup_steps.min(self.total_steps)) as f64;
        self.base_lr * (remaining / span).min(1.0)
    }
}

/// Rescales `grads` to global norm at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
