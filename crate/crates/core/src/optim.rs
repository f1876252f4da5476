//! First-order training machinery: Adam with decoupled weight decay and a
//! cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor, plus the step
/// counter used for bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay: parameters
/// first shrink by `lr * weight_decay * param`, then receive the standard
/// Adam update. Weight decay therefore never enters the moment estimates.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(state.t as i32));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(cfg.eps);
    let decay = T::from_f64(lr * cfg.weight_decay);
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!(
                "param {:?} vs grad {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let pd = param.data_mut();
        let gd = grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            pd[i] -= decay * pd[i];
            md[i] = b1 * md[i] + (one - b1) * gd[i];
            vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
            let m_hat = md[i] / corr1;
            let v_hat = vd[i] / corr2;
            pd[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr0` at t = 0 to `lr_min` at t = T:
/// `lr_min + 0.5 * (lr0 - lr_min) * (1 + cos(pi * t / T))`.
pub fn cosine_lr(t: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_zero_decay_is_noop() {
        let mut p = Tensor::filled(&[2, 2, 1], 0.7);
        let before = p.clone();
        let mut state = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..3 {
            adam_step(
                &mut [&mut p],
                &[Tensor::zeros(&[2, 2, 1])],
                &mut state,
                1e-3,
                &cfg,
            )
            .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_minus_lr() {
        // g = 1, t = 1: bias-corrected m_hat = v_hat = 1, so the update is
        // -lr / (1 + eps), within 1e-8 of -lr
        let mut p = Tensor::scalar(0.0f64);
        let mut state = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state, 1e-3, &cfg).unwrap();
        assert!((p.scalar_value().unwrap() + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn decay_without_grads_shrinks_multiplicatively() {
        let mut p = Tensor::scalar(2.0);
        let mut state = AdamState::new(&[&p]);
        let cfg = AdamConfig::default();
        let lr = 0.01;
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut state, lr, &cfg).unwrap();
        }
        let expect = 2.0 * (1.0 - lr * cfg.weight_decay).powi(3);
        assert!((p.scalar_value().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2 from 0; gradient is 2(x - 3)
        let mut p = Tensor::scalar(0.0f64);
        let mut state = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..4000 {
            let x = p.scalar_value().unwrap();
            let g = Tensor::scalar(2.0 * (x - 3.0));
            adam_step(&mut [&mut p], &[g], &mut state, 5e-3, &cfg).unwrap();
        }
        assert!((p.scalar_value().unwrap() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut state = AdamState::new(&[&p]);
        let bad = Tensor::zeros(&[3]);
        assert!(adam_step(&mut [&mut p], &[bad], &mut state, 1e-3, &AdamConfig::default()).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let (lr0, lr_min) = (1e-3, 1e-6);
        assert_eq!(cosine_lr(0, 2000, lr0, lr_min), lr0);
        assert_eq!(cosine_lr(2000, 2000, lr0, lr_min), lr_min);
        let mid = cosine_lr(1000, 2000, lr0, lr_min);
        assert!((mid - 5.005e-4).abs() < 1e-12);
        // monotone decreasing over the run
        let mut last = f64::INFINITY;
        for t in 0..=2000 {
            let lr = cosine_lr(t, 2000, lr0, lr_min);
            assert!(lr <= last);
            last = lr;
        }
    }
}
