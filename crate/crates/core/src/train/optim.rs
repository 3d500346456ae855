//! Adam, the warmup-stable-decay schedule and global-norm clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::config::PhaseConfig;

/// Bias-corrected Adam. Moments are kept for every parameter in store
/// order; non-trainable entries are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn for_phase(store: &ParamStore, cfg: &PhaseConfig) -> Self {
        Adam::new(store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// One update with learning rate `lr`. A non-finite gradient in any
    /// trainable parameter aborts the step before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = store
            .iter()
            .find(|p| p.trainable && !p.grad.all_finite())
        {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Warmup from 0 to `lr_start`, hold, then decay linearly to `lr_end` over
/// the last `decay_fraction` of the steps. The decay segment starts no
/// earlier than the end of warmup and reaches `lr_end` exactly on the last
/// step.
pub fn lr_schedule(step: usize, cfg: &PhaseConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_start * step as f64 / cfg.warmup_steps as f64;
    }
    let stable = ((1.0 - cfg.decay_fraction) * cfg.steps as f64).ceil() as usize;
    let decay_start = stable.max(cfg.warmup_steps);
    if step < decay_start || cfg.decay_fraction == 0.0 {
        return cfg.lr_start;
    }
    let last = cfg.steps.saturating_sub(1);
    let f = if last > decay_start {
        ((step - decay_start) as f64 / (last - decay_start) as f64).min(1.0)
    } else {
        1.0
    };
    cfg.lr_end * f + cfg.lr_start * (1.0 - f)
}

/// Global L2 norm of all trainable gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let n = grad_norm(store);
    if n > max_norm && n.is_finite() {
        let s = max_norm / n;
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::vector(vec![v])).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(0.0);
        s.get_mut(crate::ParamId(0)).grad = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(&s, 0.9, 0.99, 1e-8);
        adam.step(&mut s, 0.01).unwrap();
        let got = s.value("theta").unwrap().data()[0];
        assert!((got + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = one_param(0.7);
        let mut adam = Adam::new(&s, 0.9, 0.99, 1e-8);
        for _ in 0..5 {
            adam.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.value("theta").unwrap().data(), &[0.7]);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut s = one_param(0.7);
        s.get_mut(crate::ParamId(0)).grad = Tensor::vector(vec![f64::NAN]);
        let mut adam = Adam::new(&s, 0.9, 0.99, 1e-8);
        match adam.step(&mut s, 0.1) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "theta"),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = PhaseConfig {
            steps: 100,
            warmup_steps: 10,
            lr_start: 1e-3,
            lr_end: 1e-5,
            ..PhaseConfig::phase1()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(10, &cfg), 1e-3);
        assert_eq!(lr_schedule(79, &cfg), 1e-3);
        assert_eq!(lr_schedule(99, &cfg), 1e-5);
        assert!(lr_schedule(90, &cfg) < 1e-3 && lr_schedule(90, &cfg) > 1e-5);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![0.0])).unwrap();
        s.insert("b", Tensor::vector(vec![0.0])).unwrap();
        s.get_mut(crate::ParamId(0)).grad = Tensor::vector(vec![3.0]);
        s.get_mut(crate::ParamId(1)).grad = Tensor::vector(vec![4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-15);
    }
}
