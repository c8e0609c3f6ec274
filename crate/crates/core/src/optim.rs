//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct MomentState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> MomentState<T> {
    pub fn new(numel: usize) -> Self {
        MomentState {
            m: vec![T::zero(); numel],
            v: vec![T::zero(); numel],
            step: 0,
        }
    }
}

/// One bias-corrected update: `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut MomentState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    if state.m.len() != param.numel() || state.v.len() != param.numel() {
        return Err(Error::shape("adam_step state", param.shape(), &[state.m.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
    let one = T::one();
    let p = param.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state for a whole model, keyed by parameter name. Each
/// parameter keeps its own step count, so parameters that sit out some
/// updates get correct bias correction when they do train.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamConfig,
    state: HashMap<String, MomentState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW {
            cfg,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        let state = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| MomentState::new(param.numel()));
        adam_step(param, grad, state, &self.cfg)
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.step)
    }
}
