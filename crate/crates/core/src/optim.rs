//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.
//!
//! Moment estimates are plain tensors keyed by parameter name so they can be
//! checkpointed and a resumed run continues bit for bit.

use std::collections::{BTreeMap, HashMap};

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("eps must be positive; weight_decay and grad_clip non-negative"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("min_lr_ratio outside [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate at (0-based) `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Debug)]
pub struct AdamW {
    pub config: OptimConfig,
    vars: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, config: OptimConfig) -> Result<Self> {
        config.validate()?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &vars {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { config, vars, m, v, step: 0 })
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Global L2 norm of the gradients of the managed variables.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var) {
                sq += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let c = self.config;
        let clip = if c.grad_clip > 0.0 {
            let n = self.grad_norm(grads)?;
            if n > c.grad_clip { c.grad_clip / n } else { 1.0 }
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var) else { continue };
            let g = (g.detach() * clip)?;
            let m = ((&self.m[name] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[name] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor().detach();
            let next = ((theta * (1.0 - lr * c.weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments as a tensor map (`m.<name>`, `v.<name>`) for checkpointing.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, map: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (name, var) in &self.vars {
            for (prefix, store) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}.{name}");
                let t = map.get(&key).ok_or_else(|| Error::NotFound(format!("optimizer state `{key}` missing")))?;
                if t.dims() != var.dims() {
                    return Err(Error::shape(format!("optimizer state `{key}` has shape {:?}", t.dims())));
                }
                store.insert(name.clone(), t.to_dtype(var.dtype())?.to_device(var.device())?);
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn schedule_shape() {
        let c = OptimConfig { lr: 1.0, warmup_steps: 10, min_lr_ratio: 0.1, ..Default::default() };
        assert!((c.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(100, 100) - 0.1).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = c.lr_at(s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn converges_on_linear_least_squares() {
        // full-batch fit of y = 2x - 1; loss must fall monotonically at a small step
        let dev = Device::Cpu;
        let w = Var::zeros((1, 1), DType::F64, &dev).unwrap();
        let b = Var::zeros(1, DType::F64, &dev).unwrap();
        let xs = Tensor::new(&[[-1.0f64], [0.0], [0.5], [1.0], [2.0]], &dev).unwrap();
        let ys = ((&xs * 2.0).unwrap() - 1.0).unwrap();
        let cfg = OptimConfig { lr: 0.01, grad_clip: 0.0, ..Default::default() };
        let mut opt = AdamW::new(vec![("w".into(), w.clone()), ("b".into(), b.clone())], cfg).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..800 {
            let pred = xs.matmul(w.as_tensor()).unwrap().broadcast_add(b.as_tensor()).unwrap();
            let loss = (pred - &ys).unwrap().sqr().unwrap().mean_all().unwrap();
            let l = loss.to_scalar::<f64>().unwrap();
            assert!(l <= prev + 1e-12, "{l} > {prev}");
            prev = l;
            let g = loss.backward().unwrap();
            opt.step(&g, cfg.lr).unwrap();
        }
        assert!(prev < 1e-2, "{prev}");
    }

    #[test]
    fn state_roundtrip_continues_identically() {
        let dev = Device::Cpu;
        let cfg = OptimConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
        let step = |w: &Var, opt: &mut AdamW| {
            let g = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&g, 0.1).unwrap();
        };
        let w = Var::new(&[1.0f32, -2.0, 0.5], &dev).unwrap();
        let mut opt = AdamW::new(vec![("w".into(), w.clone())], cfg).unwrap();
        for _ in 0..6 {
            step(&w, &mut opt);
        }

        let a = Var::new(&[1.0f32, -2.0, 0.5], &dev).unwrap();
        let mut first = AdamW::new(vec![("w".into(), a.clone())], cfg).unwrap();
        for _ in 0..3 {
            step(&a, &mut first);
        }
        let b = Var::from_tensor(&a.as_tensor().copy().unwrap()).unwrap();
        let mut resumed = AdamW::new(vec![("w".into(), b.clone())], cfg).unwrap();
        resumed.load_state(&first.state_tensors(), first.step_count()).unwrap();
        for _ in 3..6 {
            step(&b, &mut resumed);
        }
        assert_eq!(w.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn invalid_config() {
        assert!(OptimConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
