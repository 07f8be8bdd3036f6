//! Layer-wise IoU thresholds and the sigmoid weights that modulate
//! denoising-query features.
//!
//! Layer `l` (1-based) of an `N`-layer decoder uses the threshold
//! `θ_l = θ₁ + Δθ·(l−1)/(N−1)`. A denoising query whose reconstruction at
//! layer `l` has IoU `u` with its ground truth receives the weight
//! `ω = σ((u − θ_l)/τ)`, and its feature is scaled by `ω` before the
//! prediction heads that feed the denoising loss. Weights are constants with
//! respect to differentiation.

use alloc::vec::Vec;

use crate::encode::sigmoid;
use crate::geom::{iou_cxcywh, BoxCxCyWH};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CascadeConfig {
    pub theta1: f64,
    pub delta_theta: f64,
    pub n_layers: usize,
    pub tau: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            theta1: 0.3,
            delta_theta: 0.6,
            n_layers: 6,
            tau: 0.1,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1 < 1.0) {
            return Err(Error::Config("theta1 must lie in (0, 1)".into()));
        }
        if !(self.delta_theta >= 0.0) || self.theta1 + self.delta_theta > 1.0 + 1e-12 {
            return Err(Error::Config("theta1 + delta_theta must not exceed 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Thresholds snap to a 1e-12 grid so that decimal schedules such as
/// 0.3..0.9 come out as the exact decimal values.
fn snap(x: f64) -> f64 {
    libm::round(x * 1e12) / 1e12
}

/// One threshold per decoder layer, first layer first.
pub fn threshold_schedule(cfg: &CascadeConfig) -> Vec<f64> {
    if cfg.n_layers <= 1 {
        return alloc::vec![cfg.theta1];
    }
    let steps = (cfg.n_layers - 1) as f64;
    (0..cfg.n_layers)
        .map(|l| snap(cfg.theta1 + cfg.delta_theta * l as f64 / steps))
        .collect()
}

pub fn dn_weight(iou: f64, theta: f64, tau: f64) -> f64 {
    sigmoid((iou - theta) / tau)
}

pub fn modulate(feature: &[f64], omega: f64) -> Vec<f64> {
    feature.iter().map(|&f| omega * f).collect()
}

/// Weights for one layer's denoising reconstructions; prediction `j` pairs
/// with ground truth `j`.
pub fn layer_dn_weights(preds: &[BoxCxCyWH], gts: &[BoxCxCyWH], theta: f64, tau: f64) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::CountMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, t)| dn_weight(iou_cxcywh(p, t), theta, tau))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_is_exact() {
        let s = threshold_schedule(&CascadeConfig::default());
        assert_eq!(s, [0.3, 0.42, 0.54, 0.66, 0.78, 0.9]);
    }

    #[test]
    fn degenerate_schedules() {
        let one = CascadeConfig {
            n_layers: 1,
            ..Default::default()
        };
        assert_eq!(threshold_schedule(&one), [0.3]);
        let flat = CascadeConfig {
            delta_theta: 0.0,
            ..Default::default()
        };
        assert!(threshold_schedule(&flat).iter().all(|&t| t == 0.3));
    }

    #[test]
    fn weight_values() {
        assert_eq!(dn_weight(0.42, 0.42, 0.1), 0.5);
        assert!((dn_weight(0.5, 0.4, 0.1) - sigmoid(1.0)).abs() < 1e-12);
        assert!((sigmoid(1.0) - 0.73106).abs() < 1e-5);
        assert!((dn_weight(0.3 - 0.5, 0.3, 0.1) - 0.00669).abs() < 1e-5);
    }

    #[test]
    fn per_layer_weights_for_a_fixed_reconstruction() {
        // IoU 0.5 accepted early, suppressed late.
        let early = dn_weight(0.5, 0.3, 0.1);
        let late = dn_weight(0.5, 0.9, 0.1);
        assert!((early - 0.8808).abs() < 1e-4);
        assert!((late - 0.0180).abs() < 1e-4);
    }

    #[test]
    fn perfect_reconstruction_and_count_mismatch() {
        let b = BoxCxCyWH::new(0.5, 0.5, 0.2, 0.3);
        let w = layer_dn_weights(&[b, b], &[b, b], 0.66, 0.1).unwrap();
        assert!(w.iter().all(|&x| x == dn_weight(1.0, 0.66, 0.1)));
        assert!(matches!(
            layer_dn_weights(&[b], &[b, b], 0.3, 0.1),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn modulation() {
        let f = [1.0, -2.0, 0.5];
        assert_eq!(modulate(&f, 1.0), f);
        assert!(modulate(&f, 1e-12).iter().all(|x| x.abs() < 1e-11));
    }

    #[test]
    fn invalid_configs() {
        let bad = CascadeConfig {
            theta1: 0.5,
            delta_theta: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(CascadeConfig {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
