//! Bias-corrected adaptive-moment optimizer.

use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update of `store` from `grads`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, grads: &ParamGrads, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn single(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert("x", Tensor::new([n], values).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = single(vec![1.5, -2.0]);
        let mut state = AdamState::new(&store);
        let grads = ParamGrads::zeros_like(&store);
        adam_step(&mut store, &mut state, &grads, &AdamConfig::with_lr(0.1));
        assert_eq!(store.get(ParamId(0)).data(), &[1.5, -2.0]);
    }

    #[test]
    fn one_step_on_square_decreases() {
        let mut store = single(vec![1.0]);
        let mut state = AdamState::new(&store);
        let mut grads = ParamGrads::zeros_like(&store);
        grads.get_mut(ParamId(0))[0] = 2.0;
        adam_step(&mut store, &mut state, &grads, &AdamConfig::with_lr(0.1));
        assert!(store.get(ParamId(0)).data()[0] < 1.0);
    }

    #[test]
    fn quadratic_converges() {
        // f(x, y) = x^2 + 3 y^2
        let mut store = single(vec![1.0, -1.0]);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig::with_lr(0.05);
        for _ in 0..200 {
            let x = store.get(ParamId(0)).data().to_vec();
            let mut grads = ParamGrads::zeros_like(&store);
            grads.get_mut(ParamId(0))[0] = 2.0 * x[0];
            grads.get_mut(ParamId(0))[1] = 6.0 * x[1];
            adam_step(&mut store, &mut state, &grads, &cfg);
        }
        let x = store.get(ParamId(0)).data();
        let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
        assert!(norm < 1e-3, "norm {norm}");
    }
}
