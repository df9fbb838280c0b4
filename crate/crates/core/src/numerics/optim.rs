//! Parameter updates. Every step returns a fresh [`ParamSet`] and leaves its
//! inputs untouched, so meta-learning can keep the base parameters around
//! while producing adapted copies.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::Result;

/// `p - lr * g` for every tensor.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.zip_with(grads, |p, g| p - lr * g)
}

/// Moment-based update with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates. Empty until the first step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Option<ParamSet>,
    pub second_moment: Option<ParamSet>,
}

pub fn adaptive_step(
    config: &AdamConfig,
    state: &AdamState,
    params: &ParamSet,
    grads: &ParamSet,
    lr: f64,
) -> Result<(AdamState, ParamSet)> {
    params.ensure_same_layout(grads)?;
    let zeros = params.zeros_like();
    let m_prev = state.first_moment.as_ref().unwrap_or(&zeros);
    let v_prev = state.second_moment.as_ref().unwrap_or(&zeros);

    let (b1, b2) = (config.beta1, config.beta2);
    let m = m_prev.zip_with(grads, |m, g| b1 * m + (1.0 - b1) * g)?;
    let v = v_prev.zip_with(grads, |v, g| b2 * v + (1.0 - b2) * g * g)?;

    let step = state.step + 1;
    let m_correction = 1.0 - b1.powi(step as i32);
    let v_correction = 1.0 - b2.powi(step as i32);
    let direction = m.zip_with(&v, |m, v| {
        (m / m_correction) / ((v / v_correction).sqrt() + config.eps)
    })?;
    let wd = config.weight_decay;
    let updated = params.zip_with(&direction, |p, d| p - lr * (d + wd * p))?;

    let state = AdamState { step, first_moment: Some(m), second_moment: Some(v) };
    Ok((state, updated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(name: &str, values: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::vector(values));
        p
    }

    #[test]
    fn sgd_examples() {
        let p = single("w", vec![1.0]);
        let g = single("w", vec![1.0]);
        let out = sgd_step(&p, &g, 0.1).unwrap();
        assert!((out.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(sgd_step(&p, &p.zeros_like(), 0.1).unwrap(), p);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        // input untouched
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let p = single("w", vec![1.0, 2.0]);
        let g = single("w", vec![1.0]);
        assert!(sgd_step(&p, &g, 0.1).is_err());
    }

    #[test]
    fn sgd_round_trip() {
        let p = single("w", vec![0.3, -1.7, 2.5]);
        let g = single("w", vec![0.11, 4.0, -0.5]);
        let there = sgd_step(&p, &g, 0.37).unwrap();
        let back = sgd_step(&there, &g, -0.37).unwrap();
        assert!(back.max_abs_diff(&p).unwrap() < 1e-12);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let config = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let p = single("w", vec![0.5, -2.0, 3.0]);
        let g = single("w", vec![1.0, 1.0, 1.0]);
        let lr = 1e-3;
        let (state, out) = adaptive_step(&config, &AdamState::default(), &p, &g, lr).unwrap();
        // m = 0.1, v = 0.001; bias-corrected both are 1, update = lr / (1 + eps).
        let expected = lr * 1.0 / (1.0 + 1e-8);
        for (a, b) in p.get("w").unwrap().data().iter().zip(out.get("w").unwrap().data()) {
            assert!(((a - b) - expected).abs() < 1e-15);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_without_decay_is_identity() {
        let config = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let p = single("w", vec![0.5, -2.0]);
        let (_, out) =
            adaptive_step(&config, &AdamState::default(), &p, &p.zeros_like(), 0.1).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn adam_is_deterministic() {
        let config = AdamConfig::default();
        let p = single("w", vec![0.5, -2.0]);
        let g = single("w", vec![0.25, 0.75]);
        let (s1, _) = adaptive_step(&config, &AdamState::default(), &p, &g, 0.1).unwrap();
        let a = adaptive_step(&config, &s1, &p, &g, 0.1).unwrap();
        let b = adaptive_step(&config, &s1, &p, &g, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_decoupled_decay_shrinks_params() {
        let config = AdamConfig { weight_decay: 0.5, ..AdamConfig::default() };
        let p = single("w", vec![2.0]);
        let (_, out) =
            adaptive_step(&config, &AdamState::default(), &p, &p.zeros_like(), 0.1).unwrap();
        assert!((out.get("w").unwrap().data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
