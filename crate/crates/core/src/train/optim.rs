use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamRegistry, Scalar};

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear decay from `lr` to zero at the last step.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Initial learning rate.
    pub lr: f64,
    pub schedule: Schedule,
    /// Steps of linear warmup from zero.
    pub warmup_steps: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            schedule: Schedule::Constant,
            warmup_steps: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Fine-tuning settings reported for the four-way multiple-choice
    /// benchmark with a large pre-trained encoder.
    pub fn paper_multi_choice() -> Self {
        Self {
            lr: 4e-6,
            epochs: 3,
            batch_size: 24,
            ..Self::default()
        }
    }

    /// Fine-tuning settings reported for the binary retrieval benchmarks.
    pub fn paper_binary() -> Self {
        Self {
            lr: 3e-6,
            epochs: 2,
            batch_size: 64,
            ..Self::default()
        }
    }

    /// Learning rate of 1-based `step` out of `total` steps: linear
    /// warmup to `lr`, then the schedule.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Linear => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let left = total.saturating_sub(step - 1) as f64;
                self.lr * (left / span).clamp(0.0, 1.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "betas {:?} outside [0, 1)",
                self.betas
            )));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "eps must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// AdamW moment estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `params`:
    ///
    /// ```text
    /// theta <- theta - lr * wd * theta
    /// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
    /// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    ///
    /// Nothing changes when any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamRegistry<T>,
        grads: &Gradients<T>,
        cfg: &OptimConfig,
    ) -> Result<()> {
        self.step_with_lr(params, grads, cfg, cfg.lr)
    }

    /// `step` with the learning rate given explicitly.
    pub fn step_with_lr(
        &mut self,
        params: &mut ParamRegistry<T>,
        grads: &Gradients<T>,
        cfg: &OptimConfig,
        lr: f64,
    ) -> Result<()> {
        for (name, _) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: name.to_string(),
                });
            }
        }
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let t = self.step as i32;
        let c1 = T::of(1.0 - b1.powi(t));
        let c2 = T::of(1.0 - b2.powi(t));
        let (b1, b2) = (T::of(b1), T::of(b2));
        let decay = T::of(lr * cfg.weight_decay);
        let lr = T::of(lr);
        let eps = T::of(cfg.eps);
        let one = T::one();
        for (name, theta) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *p = *p - decay * *p;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(theta: f64) -> ParamRegistry<f64> {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::row(&[theta])).unwrap();
        reg
    }

    fn grads_of(reg: &ParamRegistry<f64>, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::zeros_like(reg);
        grads.accumulate("w", &[g]).unwrap();
        grads
    }

    #[test]
    fn schedules() {
        let c = OptimConfig {
            lr: 1.0,
            ..OptimConfig::default()
        };
        assert_eq!(c.lr_at(1, 10), 1.0);
        assert_eq!(c.lr_at(10, 10), 1.0);
        let lin = OptimConfig {
            schedule: Schedule::Linear,
            ..c.clone()
        };
        assert_eq!(lin.lr_at(1, 10), 1.0);
        assert!((lin.lr_at(6, 11) - 6.0 / 11.0).abs() < 1e-12);
        assert!((lin.lr_at(11, 11) - 1.0 / 11.0).abs() < 1e-12);
        let warm = OptimConfig {
            warmup_steps: 4,
            ..lin
        };
        assert_eq!(warm.lr_at(1, 14), 0.25);
        assert_eq!(warm.lr_at(4, 14), 1.0);
        assert!((warm.lr_at(5, 14) - 1.0).abs() < 1e-12);
        assert!((warm.lr_at(9, 14) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_params() {
        let mut reg = single(0.7);
        let grads = Gradients::zeros_like(&reg);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new();
        opt.step(&mut reg, &grads, &cfg).unwrap();
        assert_eq!(reg.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut reg = single(2.0);
        let grads = Gradients::zeros_like(&reg);
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new();
        opt.step(&mut reg, &grads, &cfg).unwrap();
        assert!((reg.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut reg = single(1.0);
        let grads = grads_of(&reg, 1.0);
        let cfg = OptimConfig::default();
        let mut opt = AdamW::new();
        opt.step(&mut reg, &grads, &cfg).unwrap();
        // decay: 1 - 1e-3 * 0.01; m = 0.1, v = 0.001; mhat = vhat = 1
        let want = (1.0 - 1e-5) - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((reg.get("w").unwrap().data()[0] - want).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut reg = single(1.0);
        let grads = grads_of(&reg, f64::NAN);
        let mut opt = AdamW::new();
        let err = opt
            .step(&mut reg, &grads, &OptimConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "w"));
        assert_eq!(reg.get("w").unwrap().data(), &[1.0]);
        assert_eq!(opt.step, 0);
    }
}
