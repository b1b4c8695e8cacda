// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam `ε`.
pub const ADAM_EPS: f32 = 1e-8;
/// Adam `β1`.
pub const ADAM_BETA1: f32 = 0.9;
/// Adam `β2`.
pub const ADAM_BETA2: f32 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

/// Moment estimates for one parameter set, index-aligned with the slice
/// passed to [`adam_step`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update using each tensor's accumulated gradient.
///
/// `lr_scale` multiplies the configured learning rate (warmup); `ascent`
/// flips the update direction so the parameters climb the objective.
/// Gradients are left in place; callers reset them.
pub fn adam_step(
    params: &mut [&mut Tensor],
    cfg: &AdamConfig,
    state: &mut AdamState,
    lr_scale: f32,
    ascent: bool,
) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::MissingGrad(i));
    }
    if state.m.len() != params.len() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.lr * lr_scale;
    let sign = if ascent { 1.0 } else { -1.0 };
    for (k, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x += sign * lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]).with_grad();
        p.accumulate_grad(&[0.0; 3]).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &AdamConfig::with_lr(0.1), &mut st, 1.0, false).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g² after bias correction, so the step is lr·g/(|g|+ε).
        let lr = 0.01f32;
        let mut p = Tensor::scalar(0.5f32).with_grad();
        p.accumulate_grad(&[1.0]).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &AdamConfig::with_lr(lr), &mut st, 1.0, false).unwrap();
        let expected = 0.5 - lr * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-6);
        assert!(((0.5 - p.item()) - lr).abs() < 1e-6);
    }

    #[test]
    fn ascent_flips_direction() {
        let mut p = Tensor::scalar(0.0f32).with_grad();
        p.accumulate_grad(&[-3.0]).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &AdamConfig::with_lr(0.1), &mut st, 1.0, true).unwrap();
        assert!(p.item() < 0.0);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::scalar(0.0f32);
        let mut st = AdamState::new();
        let err = adam_step(&mut [&mut p], &AdamConfig::default(), &mut st, 1.0, false);
        assert!(matches!(err, Err(Error::MissingGrad(0))));
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    }
}
