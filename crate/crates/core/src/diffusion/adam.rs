//! Adam optimizer over a [`Params`](super::nn::Params) registry, with
//! whole-group freezing.
//!
//! Frozen tensors are skipped entirely — no parameter update and no
//! moment update — so unfreezing later resumes from unbiased state.

use super::nn::{Grads, Params};
use super::FreezeMode;

/// Standard Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data().len()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must mirror `params`; tensors whose
    /// group `freeze` covers are left untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Grads, freeze: FreezeMode) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (ti, tensor) in params.tensors_mut().iter_mut().enumerate() {
            if freeze.freezes(tensor.group()) {
                continue;
            }
            let g = &grads.slots()[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for (k, w) in tensor.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
