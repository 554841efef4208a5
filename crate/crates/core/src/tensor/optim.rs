//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip_norm: Some(35.0) }
    }
}

/// First / second moment buffers, one per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| alloc::vec![0.0; p.tensor.len()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One update from the gradients held in the store, which are left untouched.
pub fn optimizer_step(store: &mut ParamStore, state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if !(lr > 0.0) {
        bail!(Config, "learning rate must be positive, got {lr}");
    }
    if state.m.len() != store.len() {
        bail!(Config, "optimizer state tracks {} tensors, store has {}", state.m.len(), store.len());
    }
    let clip = match cfg.clip_norm {
        Some(max) => {
            let n = store.grad_norm();
            if n > max {
                max / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.data().to_vec();
        for (((w, g), mi), vi) in p.tensor.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g * clip;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

/// Half-cosine decay from `base` at step 0 to 0 at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_without_decay_keeps_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full(&[3], 0.7));
        let before = store.clone();
        let mut st = AdamWState::new(&store);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        optimizer_step(&mut store, &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(store, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        store.get_mut(id).grad.data_mut()[0] = 1.0;
        let mut st = AdamWState::new(&store);
        let cfg = AdamWConfig { weight_decay: 0.0, clip_norm: None, ..Default::default() };
        optimizer_step(&mut store, &mut st, 0.01, &cfg).unwrap();
        let w = store.value(id).item();
        assert!((w - (2.0 - 0.01)).abs() < 1e-9, "{w}");
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        let mut st = AdamWState::new(&store);
        assert!(optimizer_step(&mut store, &mut st, 0.0, &AdamWConfig::default()).is_err());
    }
}
