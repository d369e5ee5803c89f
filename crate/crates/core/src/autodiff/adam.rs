use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_config(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update over every parameter in `params`, then
/// clears the gradients.
///
/// A parameter whose gradient is identically zero is left untouched along
/// with its moments, so parameters that took no part in a loss (a frozen
/// extractor, an unused transform) do not drift from stale momentum.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, value, grad) in params.values_and_grads_mut() {
        if grad.values().iter().all(|g| *g == 0.0) {
            continue;
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.shape()));
        for (((p, g), mi), vi) in value
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.zero_grads();
}

/// Plain gradient descent `p -= lr * g`, then clears the gradients.
pub fn sgd_step(params: &mut ParamStore, lr: f64) {
    for (_, value, grad) in params.values_and_grads_mut() {
        for (p, g) in value.values_mut().iter_mut().zip(grad.values()) {
            *p -= lr * g;
        }
    }
    params.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = scalar_store(0.7);
        let mut s = AdamState::new();
        adam_step(&mut p, &mut s, 1e-4);
        assert_eq!(p.get("x").unwrap().item(), 0.7);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = scalar_store(0.0);
        let mut s = AdamState::new();
        p.accumulate_grad("x", &Tensor::scalar(1.0)).unwrap();
        adam_step(&mut p, &mut s, 1e-4);
        // mhat = 1, vhat = 1
        let expected = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - expected).abs() < 1e-18);
        assert_eq!(p.grad("x").unwrap().item(), 0.0);
    }

    #[test]
    fn two_steps_follow_recurrence() {
        let mut p = scalar_store(0.0);
        let mut s = AdamState::new();
        for _ in 0..2 {
            p.accumulate_grad("x", &Tensor::scalar(0.5)).unwrap();
            adam_step(&mut p, &mut s, 1e-3);
        }
        assert_eq!(s.step_count(), 2);
        let m = 0.9 * (0.1 * 0.5) + 0.1 * 0.5;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 0.25;
        assert!((s.first_moment("x").unwrap().item() - m).abs() < 1e-15);
        assert!((s.second_moment("x").unwrap().item() - v).abs() < 1e-15);
        // with a constant gradient mhat/sqrt(vhat) is 1 at every step
        let step = |t: i32| {
            let mh = (0.5 * (1.0 - 0.9f64.powi(t))) / (1.0 - 0.9f64.powi(t));
            let vh = (0.25 * (1.0 - 0.999f64.powi(t))) / (1.0 - 0.999f64.powi(t));
            1e-3 * mh / (vh.sqrt() + 1e-8)
        };
        let expected = -(step(1) + step(2));
        assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);
    }
}
