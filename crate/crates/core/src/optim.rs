//! Adam / AdamW with global-norm gradient clipping.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied only to entries flagged `decay`.
    pub weight_decay: f64,
    /// Global-norm clip threshold; non-positive disables clipping.
    pub clip: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64, clip: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip }
    }

    pub fn adamw(lr: f64, weight_decay: f64, clip: f64) -> Self {
        Self { weight_decay, ..Self::adam(lr, clip) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m = store.entries().iter().map(|e| alloc::vec![0.0; e.value.len()]).collect::<Vec<_>>();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips `grads` in place and applies one update. Returns the pre-clip global norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> f64 {
        let norm = grads.global_norm();
        if self.config.clip > 0.0 && norm > self.config.clip {
            grads.scale(self.config.clip / norm);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - math::powi(c.beta1, self.step as i32);
        let bc2 = 1.0 - math::powi(c.beta2, self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let decay = store.entry(id).decay && c.weight_decay > 0.0;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.value_mut(id);
            for i in 0..w.data.len() {
                let gi = g.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                if decay {
                    w.data[i] -= c.lr * c.weight_decay * w.data[i];
                }
                w.data[i] -= c.lr * mh / (math::sqrt(vh) + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_along_sign() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[2], alloc::vec![1.0, -1.0]), false);
        let mut opt = Adam::new(AdamConfig::adam(0.1, 0.0), &s);
        let mut g = Gradients::empty(1);
        g.accumulate(id, &[3.0, -0.5], &[2]);
        opt.step(&mut s, &mut g);
        let w = &s.value(ParamId(0)).data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[2]), false);
        let mut opt = Adam::new(AdamConfig::adam(0.1, 1.0), &s);
        let mut g = Gradients::empty(1);
        g.accumulate(id, &[30.0, 40.0], &[2]);
        let n = opt.step(&mut s, &mut g);
        assert!((n - 50.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
