//! Adam and global-norm gradient clipping.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(size: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: vec![0.0; size],
            second: vec![0.0; size],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for i in 0..params.len() {
            let g = grad[i];
            let m = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            self.first[i] = m;
            self.second[i] = v;
            params[i] -= lr * (m / c1) / (libm::sqrt(v / c2) + self.eps);
        }
    }
}

pub fn global_norm(grad: &[f64]) -> f64 {
    libm::sqrt(grad.iter().map(|g| g * g).sum())
}

/// Rescales `grad` so its L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}
