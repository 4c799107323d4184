//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::neural::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, parallel to the parameter list.
#[derive(Debug, Default)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One Adam update. `grads[i]` may be `None` for parameters untouched this
/// step (their moments still decay).
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    debug_assert_eq!(params.len(), grads.len());
    while state.m.len() < params.len() {
        let i = state.m.len();
        state.m.push(Tensor::zeros(params[i].rows, params[i].cols));
        state.v.push(Tensor::zeros(params[i].rows, params[i].cols));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.data.len() {
            let g = grads[i].as_ref().map(|t| t.data[j]).unwrap_or(0.0);
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m.data[j] / bc1;
            let vhat = v.data[j] / bc2;
            p.data[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].clone();
        let mut state = AdamState::new();
        let grads = vec![Some(Tensor::zeros(1, 3))];
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias correction makes the first update ~ lr * sign(g)
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new();
        let grads = vec![Some(Tensor::scalar(0.3))];
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut state, &cfg);
        let moved = 1.0 - params[0].item();
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn quadratic_converges_within_tolerance() {
        // f(x) = x^2 / 2, gradient x; 200 steps reach the optimum within 1e-4
        let mut params = vec![Tensor::scalar(0.005)];
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            learning_rate: 5e-5,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            let g = params[0].item();
            adam_step(&mut params, &[Some(Tensor::scalar(g))], &mut state, &cfg);
        }
        assert!(
            params[0].item().abs() < 1e-4,
            "ended at {}",
            params[0].item()
        );
    }
}
