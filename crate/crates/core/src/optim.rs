//! Adam with classic (gradient-additive) L2 weight decay and a step-decay
//! learning-rate schedule.

use alloc::{vec, vec::Vec};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr0: f64,
    /// Multiplier applied every `decay_every` iterations.
    pub decay_factor: f64,
    pub decay_every: u64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay_factor: 0.5,
            decay_every: 5000,
            lr_floor: 1.25e-5,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2,
            total_iterations: 40_000,
            checkpoint_every: 1000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0
            && self.decay_every > 0
            && self.lr_floor >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.batch_size > 0
            && self.checkpoint_every > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!(
                "invalid optimizer config {:?}",
                self
            )))
        }
    }

    /// `lr0 * factor^floor(it / decay_every)`, never below `lr_floor`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let steps = (iteration / self.decay_every).min(i32::MAX as u64) as i32;
        (self.lr0 * libm::pow(self.decay_factor, steps as f64)).max(self.lr_floor)
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// One Adam update at `lr_at(iteration)`; `weight_decay * theta` is added to
/// each gradient before the moment updates.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
    iteration: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(shape_err(
            "adam_step",
            "parameter/gradient/state counts differ",
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.len() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(shape_err(
                "adam_step",
                alloc::format!("tensor {i} length mismatch"),
            ));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let lr = cfg.lr_at(iteration);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - libm::pow(b1, t);
    let bc2 = 1.0 - libm::pow(b2, t);
    let step_size = T::from_f64(lr / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / libm::sqrt(bc2));
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let wd = T::from_f64(cfg.weight_decay);
    let eps = T::from_f64(cfg.adam_eps);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][k] + wd * *theta;
            m[k] = b1t * m[k] + one_b1 * g;
            v[k] = b2t * v[k] + one_b2 * g * g;
            *theta = *theta - step_size * m[k] / ((v[k]).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_breakpoints() {
        let cfg = OptimConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(4999), 1e-4);
        assert_eq!(cfg.lr_at(5000), 5e-5);
        assert_eq!(cfg.lr_at(10000), 2.5e-5);
        assert_eq!(cfg.lr_at(14999), 2.5e-5);
        assert_eq!(cfg.lr_at(15000), 1.25e-5);
        assert_eq!(cfg.lr_at(39999), 1.25e-5);
        assert_eq!(cfg.lr_at(40000), 1.25e-5);
    }

    #[test]
    fn zero_gradient_no_decay_keeps_params() {
        let mut p = vec![Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let g = vec![0.0; 3];
        for it in 0..10 {
            adam_step(&mut p, &[&g], &mut st, &cfg, it).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = OptimConfig {
            lr0: 1e-2,
            weight_decay: 0.0,
            decay_every: u64::MAX,
            ..OptimConfig::default()
        };
        let mut p = vec![Tensor::from_vec(&[1], vec![1.0f64]).unwrap()];
        let mut st = AdamState::new(&p);
        for it in 0..200 {
            let g = vec![p[0].data()[0]];
            adam_step(&mut p, &[&g], &mut st, &cfg, it).unwrap();
        }
        assert!(p[0].data()[0].abs() < 0.1, "{}", p[0].data()[0]);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(&[3])];
        let mut st = AdamState::new(&[Tensor::<f32>::zeros(&[2])]);
        let g = vec![0.0f32; 3];
        assert!(adam_step(&mut p, &[&g], &mut st, &OptimConfig::default(), 0).is_err());
    }
}
