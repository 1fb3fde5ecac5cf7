//! Decoupled-weight-decay Adam.

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self { step: 0, m, v }
    }
}

/// One parameter slot handed to [`adamw_step`].
pub struct ParamSlot<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    /// `None` leaves the parameter and its moments untouched (not reached
    /// by the backward pass).
    pub grad: Option<&'a [T]>,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

/// Applies one AdamW update to every slot. Gradients are validated for all
/// slots before any parameter is touched.
pub fn adamw_step<T: Real>(
    slots: &mut [ParamSlot<'_, T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if state.m.len() != slots.len() {
        return Err(Error::shape(format!(
            "optimizer state holds {} parameters, got {}",
            state.m.len(),
            slots.len()
        )));
    }
    for (i, s) in slots.iter().enumerate() {
        let Some(grad) = s.grad else { continue };
        if grad.len() != s.value.numel() || state.m[i].len() != s.value.numel() {
            return Err(Error::shape(format!("gradient/state size mismatch for `{}`", s.name)));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad(s.name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr_t = T::of(lr);
    let eps = T::of(cfg.eps);
    let one = T::one();
    for (i, s) in slots.iter_mut().enumerate() {
        let Some(grad) = s.grad else { continue };
        let decay = if s.decay { one - lr_t * T::of(cfg.weight_decay) } else { one };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in s.value.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_one(value: f64, grad: f64, lr: f64, cfg: AdamWConfig) -> f64 {
        let mut p = Tensor::new([1], vec![value]).unwrap();
        let mut state = AdamState::new([&p]);
        let g = [grad];
        let mut slots = [ParamSlot { name: "p", value: &mut p, grad: Some(&g), decay: true }];
        adamw_step(&mut slots, &mut state, lr, &cfg).unwrap();
        p.item()
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        assert_eq!(step_one(0.7, 0.0, 1e-2, cfg), 0.7);
    }

    #[test]
    fn one_step_matches_hand_computed_update() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let (g, lr) = (0.3, 1e-2);
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.95) * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.95);
        let expected = 0.5 - lr * mhat / (f64::sqrt(vhat) + 1e-8);
        assert!((step_one(0.5, g, lr, cfg) - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_only_scales_parameter() {
        let cfg = AdamWConfig { weight_decay: 0.05, ..Default::default() };
        let lr = 0.1;
        assert!((step_one(2.0, 0.0, lr, cfg) - 2.0 * (1.0 - lr * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::new([2], vec![1.0f32, 2.0]).unwrap();
        let mut state = AdamState::new([&p]);
        let g = [0.0, f32::NAN];
        let mut slots = [ParamSlot { name: "enc.w", value: &mut p, grad: Some(&g), decay: true }];
        let err = adamw_step(&mut slots, &mut state, 1e-3, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn unreached_slot_keeps_value_and_moments() {
        let mut a = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let mut b = Tensor::new([1], vec![3.0]).unwrap();
        let mut state = AdamState::new([&a, &b]);
        let g = [0.5];
        let cfg = AdamWConfig::default();
        let mut slots = [
            ParamSlot { name: "a", value: &mut a, grad: None, decay: true },
            ParamSlot { name: "b", value: &mut b, grad: Some(&g), decay: true },
        ];
        adamw_step(&mut slots, &mut state, 1e-2, &cfg).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(state.m[0], vec![0.0, 0.0]);
        assert_ne!(b.item(), 3.0);
        assert_eq!(state.step, 1);
    }
}
