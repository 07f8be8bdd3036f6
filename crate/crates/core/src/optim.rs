//! Adam with decoupled weight decay.

use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            warmup_steps: 0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid optimizer settings".into()))
        }
    }
}

/// First and second moments per trainable entry, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || -> Vec<Vec<f64>> {
            store
                .entries()
                .iter()
                .map(|e| if e.trainable { alloc::vec![0.0; e.tensor.data.len()] } else { Vec::new() })
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn lr(&self) -> f64 {
        if self.cfg.warmup_steps > 0 && self.step <= self.cfg.warmup_steps {
            self.cfg.lr * self.step as f64 / self.cfg.warmup_steps as f64
        } else {
            self.cfg.lr
        }
    }

    /// One update from per-entry gradients (`None` for frozen entries).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::CountMismatch {
                left: grads.len(),
                right: store.len(),
            });
        }
        let norm = libm::sqrt(
            grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|x| x * x)
                .sum::<f64>(),
        );
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = self.cfg;
        let lr = self.lr();
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let Some(gr) = &grads[i] else { continue };
            if !e.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in e.tensor.data.iter_mut().enumerate() {
                let gk = gr[k] * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * (m[k] / bc1) / (libm::sqrt(v[k] / bc2) + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(alloc::vec![1.0, -1.0]));
        store.add_frozen("f", Tensor::row_vector(alloc::vec![3.0]));
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.update(&mut store, &[Some(alloc::vec![2.0, -0.5]), None]).unwrap();
        let w = &store.entries()[0].tensor.data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.entries()[1].tensor.data, [3.0]);
    }

    #[test]
    fn decay_shrinks_weights_without_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(alloc::vec![2.0]));
        let cfg = AdamWConfig {
            lr: 0.5,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.update(&mut store, &[Some(alloc::vec![0.0])]).unwrap();
        assert!((store.entries()[0].tensor.data[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(alloc::vec![2.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        assert!(opt.update(&mut store, &[Some(alloc::vec![f64::NAN])]).is_err());
        assert_eq!(opt.step, 0);
    }
}
