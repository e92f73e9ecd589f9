//! Adam optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment buffers plus the shared step counter.
pub struct AdamState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            step: 0,
        }
    }
}

/// Updates one parameter buffer in place. `step` is the 1-based step count
/// (already incremented for this update).
///
/// Weight decay is decoupled: `theta <- theta - lr * wd * theta` is applied
/// before the bias-corrected Adam update.
pub fn adam_update_param<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamConfig,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), m.len());
    let t = step as i32;
    let lr = T::from_f64(cfg.lr);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let eps = T::from_f64(cfg.eps);
    let wd = T::from_f64(cfg.weight_decay);
    let bias1 = T::ONE - b1.powi(t);
    let bias2 = T::ONE - b2.powi(t);
    for i in 0..param.len() {
        let mut theta = param[i];
        theta -= lr * wd * theta;
        let g = grad[i];
        m[i] = b1 * m[i] + (T::ONE - b1) * g;
        v[i] = b2 * v[i] + (T::ONE - b2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        param[i] = theta - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One optimizer step over a parameter list.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Vec<T>],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        adam_update_param(param, grad, m, v, state.step, cfg);
    }
}
