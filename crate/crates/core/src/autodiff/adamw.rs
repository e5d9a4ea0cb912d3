use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(self, lr: f32) -> Self {
        Self { lr, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamWState {
    pub fn new(len: usize, cfg: &AdamWConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn for_params(params: &[&Tensor], cfg: &AdamWConfig) -> Vec<Self> {
        params.iter().map(|p| Self::new(p.numel(), cfg)).collect()
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
///
/// Gradients are left in place.
pub fn adamw_step(params: &mut [&mut Tensor], states: &mut [AdamWState]) -> Result<()> {
    if params.len() != states.len() {
        return Err(Error::StateMismatch {
            params: params.len(),
            states: states.len(),
        });
    }
    for (i, (p, s)) in params.iter().zip(states.iter()).enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGrad(i));
        }
        if s.m.len() != p.numel() || s.v.len() != p.numel() {
            return Err(Error::StateMismatch {
                params: p.numel(),
                states: s.m.len(),
            });
        }
    }
    for (p, s) in params.iter_mut().zip(states.iter_mut()) {
        s.step += 1;
        let (b1, b2) = (s.beta1 as f64, s.beta2 as f64);
        let bc1 = 1.0 - b1.powi(s.step as i32);
        let bc2 = 1.0 - b2.powi(s.step as i32);
        let (lr, eps, wd) = (s.lr as f64, s.eps as f64, s.weight_decay as f64);
        let grad = p.grad.take().expect("checked above");
        for (((w, &g), m), v) in p.data.iter_mut().zip(&grad).zip(&mut s.m).zip(&mut s.v) {
            let g = g as f64;
            let mut w64 = *w as f64;
            w64 -= lr * wd * w64;
            let m64 = b1 * *m as f64 + (1.0 - b1) * g;
            let v64 = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m64 as f32;
            *v = v64 as f32;
            let m_hat = m64 / bc1;
            let v_hat = v64 / bc2;
            w64 -= lr * m_hat / (v_hat.sqrt() + eps);
            *w = w64 as f32;
        }
        p.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f32, g: f32) -> Tensor {
        let mut t = Tensor::parameter(vec![1], vec![x]).unwrap();
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn defaults_use_standard_moment_decays() {
        let c = AdamWConfig::default();
        assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = Tensor::parameter(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        p.set_grad(vec![0.0; 3]).unwrap();
        let mut st = vec![AdamWState::new(3, &cfg)];
        adamw_step(&mut [&mut p], &mut st).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0, 2.0]);
        assert_eq!(st[0].step, 1);
        assert_eq!(p.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² at step 1, so the Adam part of the update is lr·g/(|g|+eps).
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = scalar_param(1.0, 1.0);
        let mut st = vec![AdamWState::new(1, &cfg)];
        adamw_step(&mut [&mut p], &mut st).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] as f64 - expected).abs() < 1e-7);

        // With the default decay the extra shrink is lr·wd·w = 1e-5.
        let mut p = scalar_param(1.0, 1.0);
        let mut st = vec![AdamWState::new(1, &AdamWConfig::default())];
        adamw_step(&mut [&mut p], &mut st).unwrap();
        assert!((1.0 - p.data()[0] as f64 - 1.01e-3).abs() < 1e-7);
    }

    #[test]
    fn repeated_identical_gradients_do_not_grow_the_step() {
        let cfg = AdamWConfig::default();
        let mut p = scalar_param(1.0, 0.3);
        let mut st = vec![AdamWState::new(1, &cfg)];
        adamw_step(&mut [&mut p], &mut st).unwrap();
        let first = 1.0 - p.data()[0];
        let before = p.data()[0];
        adamw_step(&mut [&mut p], &mut st).unwrap();
        let second = before - p.data()[0];
        assert!(second <= first + 1e-7, "{second} > {first}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        let mut st = vec![AdamWState::new(2, &AdamWConfig::default())];
        assert!(matches!(adamw_step(&mut [&mut p], &mut st), Err(Error::MissingGrad(0))));
    }
}
