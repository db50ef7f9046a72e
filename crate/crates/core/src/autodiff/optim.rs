use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: AdamWState<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            state: AdamWState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn state(&self) -> &AdamWState<S> {
        &self.state
    }

    pub fn restore(&mut self, state: AdamWState<S>) {
        assert_eq!(state.m.len(), self.state.m.len(), "optimizer state size");
        self.state = state;
    }

    /// One update with learning rate `lr`; `grads` align with the store.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient count");
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let lr_s = S::lit(lr);
        let eps = S::lit(self.eps);
        let decay = S::one() - S::lit(lr * self.weight_decay);
        for (i, (param, grad)) in store.iter_mut().zip(grads).enumerate() {
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = param.value.data_mut();
            let g = grad.data();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                if lr == 0.0 {
                    continue;
                }
                if param.decay {
                    p[j] *= decay;
                }
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
