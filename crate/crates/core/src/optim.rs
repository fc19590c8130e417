//! Optimizers over flat parameter vectors and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// `lr_e = lr_0 / 2 * (1 + cos(pi * e / E))` for epoch `e` of `E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub epochs: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, epochs: usize) -> Self {
        Self { base_lr, epochs }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.base_lr;
        }
        let t = epoch.min(self.epochs) as f64 / self.epochs as f64;
        0.5 * self.base_lr * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

fn check_len(params: usize, grads: usize, state: usize) -> Result<()> {
    if params != grads || params != state {
        return Err(Error::Shape(format!(
            "optimizer state {state}, parameters {params}, gradients {grads}"
        )));
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: vec![T::zero(); len] }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        check_len(params.len(), grads.len(), self.velocity.len())?;
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        check_len(params.len(), grads.len(), self.m.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, lr, eps) = (T::one(), T::of(self.lr), T::of(self.eps));
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        let (c1, c2) = (T::of(c1), T::of(c2));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule::new(0.01, 50);
        assert_eq!(s.lr(0), 0.01);
        assert!((s.lr(25) - 0.005).abs() < 1e-15);
        assert!(s.lr(50).abs() < 1e-15);
        for e in 1..=50 {
            assert!(s.lr(e) <= s.lr(e - 1));
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Sgd::<f64>::new(1, 0.1, 0.9);
        let mut p = [1.0];
        opt.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut opt = AdamW::<f64>::new(2, 1e-3);
        opt.weight_decay = 0.0;
        let mut p = [0.0, 0.0];
        opt.step(&mut p, &[5.0, -0.1]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adamw_decays_without_gradient() {
        let mut opt = AdamW::<f64>::new(1, 0.1);
        let mut p = [2.0];
        opt.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut opt = Sgd::<f32>::new(3, 0.1, 0.9);
        assert!(opt.step(&mut [0.0; 2], &[0.0; 2]).is_err());
    }
}
