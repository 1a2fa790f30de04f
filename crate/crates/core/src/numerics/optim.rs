use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

/// Linear warmup from `warmup_lr` to `init_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub init_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(init_lr: f64, warmup_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let s = Self {
            init_lr,
            warmup_lr,
            min_lr,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.init_lr, self.warmup_lr, self.min_lr]
            .iter()
            .all(|&x| x > 0.0 && x.is_finite());
        if !positive {
            return Err(Error::config("learning rates must be positive and finite"));
        }
        if self.warmup_lr > self.init_lr || self.min_lr > self.init_lr {
            return Err(Error::config("warmup_lr and min_lr must not exceed init_lr"));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::arg(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.warmup_lr + (self.init_lr - self.warmup_lr) * frac);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.min_lr + 0.5 * (self.init_lr - self.min_lr) * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    /// Restores optimizer state saved in a checkpoint.
    pub fn from_state(config: AdamWConfig, first: Vec<Tensor>, second: Vec<Tensor>, steps: u64) -> Self {
        Self {
            config,
            first,
            second,
            steps,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One update of every trainable parameter from its stored gradient.
    ///
    /// Parameters are untouched if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::arg("optimizer state does not match parameter store"));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.steps as f64);
        let bc2 = 1.0 - c.beta2.powf(self.steps as f64);
        let decay = 1.0 - lr * c.weight_decay;
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x *= decay;
                *x -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamId;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("x", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = scalar_store(1.0);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, 0.1).unwrap();
        let x = store.get(id).value.data()[0];
        assert!((x - 0.9).abs() < 1e-6, "{x}");
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let (mut store, id) = scalar_store(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).value.data()[0], 2.0 * (1.0 - 0.001));
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        let (mut store, id) = scalar_store(3.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let x = store.get(id).value.data()[0];
            let loss = x * x;
            assert!(loss < prev);
            prev = loss;
            store.get_mut(id).grad = Tensor::scalar(2.0 * x);
            opt.step(&mut store, 0.1).unwrap();
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, id) = scalar_store(1.0);
        store.get_mut(id).grad = Tensor::scalar(f64::NAN);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        match opt.step(&mut store, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(store.get(id).value.data()[0], 1.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut store, id) = scalar_store(1.0);
        store.set_trainable(id, false);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).value.data()[0], 1.0);
    }

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::new(1e-3, 1e-4, 1e-5, 10, 110).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1e-4);
        assert_eq!(s.lr_at(10).unwrap(), 1e-3);
        assert!((s.lr_at(60).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-12);
        assert!((s.lr_at(110).unwrap() - 1e-5).abs() < 1e-12);
        assert!(s.lr_at(111).is_err());
        assert!(LrSchedule::new(1e-3, 1e-2, 1e-5, 10, 110).is_err());
        assert!(LrSchedule::new(1e-3, 1e-4, 1e-5, 110, 110).is_err());
    }
}
