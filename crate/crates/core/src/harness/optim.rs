//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            max_lr: 2e-4,
            min_lr: 2e-5,
            warmup_frac: 0.10,
            total_steps: 3000,
        }
    }
}

impl Schedule {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("schedule.total_steps", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("schedule.warmup_frac", "must be in [0, 1]"));
        }
        if !(self.max_lr >= self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::config("schedule.max_lr", "need max_lr >= min_lr >= 0"));
        }
        Ok(())
    }

    /// Linear `0 -> max_lr` over the warmup steps, then cosine down to
    /// `min_lr` at `total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!("step {step} beyond total_steps {}", self.total_steps)));
        }
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(self.max_lr * step as f64 / warm as f64);
        }
        if step == warm {
            return Ok(self.max_lr);
        }
        let span = (self.total_steps - warm) as f64;
        let progress = (step - warm) as f64 / span;
        let cos = (std::f64::consts::PI * progress).cos();
        Ok(self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + cos))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.1,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        AdamW {
            config,
            m: params.iter().map(|p| vec![T::ZERO; p.tensor.len()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.tensor.len()]).collect(),
            step: 0,
        }
    }

    /// Applies one update from the grad slots of `params`. Parameters
    /// without a grad slot are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let step_no = self.step;
        for p in params.iter() {
            if let Some(g) = &p.tensor.grad {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {} at element {pos}", p.name),
                        step: step_no,
                    });
                }
            }
        }
        let clip = if self.config.grad_clip > 0.0 {
            let norm: f64 = params
                .iter()
                .filter_map(|p| p.tensor.grad.as_ref())
                .flat_map(|g| g.iter().map(|v| v.to_f64() * v.to_f64()))
                .sum::<f64>()
                .sqrt();
            if norm > self.config.grad_clip {
                self.config.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let clip_t = T::from_f64(clip);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.decay { lr * c.weight_decay } else { 0.0 };
            let keep = T::from_f64(1.0 - decay);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.tensor.grad.take();
            let data = p.tensor.data_mut();
            match &grad {
                Some(g) => {
                    for j in 0..data.len() {
                        let gj = g[j] * clip_t;
                        m[j] = b1 * m[j] + ob1 * gj;
                        v[j] = b2 * v[j] + ob2 * gj * gj;
                        let mh = m[j].to_f64() / bc1;
                        let vh = v[j].to_f64() / bc2;
                        data[j] = data[j] * keep - T::from_f64(lr * mh / (vh.sqrt() + c.eps));
                    }
                }
                None => {
                    for j in 0..data.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                        let mh = m[j].to_f64() / bc1;
                        let vh = v[j].to_f64() / bc2;
                        data[j] = data[j] * keep - T::from_f64(lr * mh / (vh.sqrt() + c.eps));
                    }
                }
            }
            p.tensor.grad = grad;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            total_steps: 1000,
            ..Schedule::default()
        };
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(100).unwrap(), 2e-4);
        assert_eq!(s.lr_at(1000).unwrap(), 2e-5);
        assert!((s.lr_at(550).unwrap() - 1.1e-4).abs() < 1e-15);
        assert!(matches!(s.lr_at(1001), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_grad_names_tensor() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(&[2]), true);
        store.get_mut(crate::ParamId(0)).tensor.grad = Some(vec![0.0, f64::NAN]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        match opt.step(&mut store, 1e-3) {
            Err(Error::NonFinite { what, .. }) => assert!(what.contains("w")),
            other => panic!("{other:?}"),
        }
    }
}
