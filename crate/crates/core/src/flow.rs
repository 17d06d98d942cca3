//! Flow-matching objective and Euler sampler.
//!
//! Paths are linear, `z_t = (1 - t) z0 + t z1`, so the target velocity
//! `u_t = z1 - z0` does not depend on `t`.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EditModel, LatentConditions};

/// `t = sigmoid(n)`, `n ~ Normal(location, scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogitNormal {
    pub location: f64,
    pub scale: f64,
}

impl Default for LogitNormal {
    fn default() -> Self {
        Self { location: 0.0, scale: 1.0 }
    }
}

impl LogitNormal {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() || !self.location.is_finite() {
            return Err(Error::config(format!(
                "logit-normal needs finite location and scale > 0, got ({}, {})",
                self.location, self.scale
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let n = Normal::new(self.location, self.scale).map_err(|e| Error::config(e.to_string()))?;
        // keep t strictly inside (0, 1) even for extreme draws
        let t = 1.0 / (1.0 + (-n.sample(rng)).exp());
        Ok(t.clamp(1e-7, 1.0 - 1e-7))
    }
}

/// Standard normal tensor drawn from `rng` (candle's own generator is not seedable on CPU).
pub fn randn<R: Rng + ?Sized>(dims: &[usize], rng: &mut R, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct FlowSample {
    pub z0: Tensor,
    pub z1: Tensor,
    pub t: f64,
    pub z_t: Tensor,
    pub u_t: Tensor,
}

impl FlowSample {
    pub fn new(z0: Tensor, z1: Tensor, t: f64) -> Result<Self> {
        if z0.dims() != z1.dims() {
            return Err(Error::shape(format!("noise {:?} and data {:?} differ", z0.dims(), z1.dims())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::validation(format!("t = {t} outside [0, 1]")));
        }
        // endpoints are taken verbatim so z_t is exact there
        let z_t = if t == 0.0 {
            z0.clone()
        } else if t == 1.0 {
            z1.clone()
        } else {
            ((&z0 * (1.0 - t))? + (&z1 * t)?)?
        };
        let u_t = (&z1 - &z0)?;
        Ok(Self { z0, z1, t, z_t, u_t })
    }
}

/// Draw noise and a timestep for data latent `z1`.
pub fn make_training_sample<R: Rng + ?Sized>(z1: &Tensor, rng: &mut R, schedule: &LogitNormal) -> Result<FlowSample> {
    let t = schedule.sample(rng)?;
    let z0 = randn(z1.dims(), rng, z1.dtype(), z1.device())?;
    FlowSample::new(z0, z1.clone(), t)
}

/// Mean squared error over the rows of `(rows, features)` matrices selected by `row_mask`.
pub fn masked_mse(pred: &Tensor, target: &Tensor, row_mask: &[bool]) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("prediction {:?} and target {:?} differ", pred.dims(), target.dims())));
    }
    let (rows, feats) = pred.dims2()?;
    if row_mask.len() != rows {
        return Err(Error::shape(format!("loss mask has {} rows, prediction {rows}", row_mask.len())));
    }
    let count = row_mask.iter().filter(|&&m| m).count();
    if count == 0 || feats == 0 {
        return Err(Error::validation("loss mask selects no entries"));
    }
    let m: Vec<f32> = row_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let m = Tensor::from_vec(m, (rows, 1), pred.device())?.to_dtype(pred.dtype())?;
    let sq = (pred - target)?.sqr()?.broadcast_mul(&m)?;
    Ok((sq.sum_all()? / (count * feats) as f64)?)
}

/// Plain mean squared error over all entries.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("prediction {:?} and target {:?} differ", pred.dims(), target.dims())));
    }
    if pred.elem_count() == 0 {
        return Err(Error::validation("empty prediction"));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 10, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("sampler needs at least one step"));
        }
        Ok(())
    }
}

/// Integrate `dz/dt = field(z, t)` from `t = 0` to `1` with `steps` Euler steps.
pub fn euler_integrate<F>(z0: &Tensor, steps: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps < 1 {
        return Err(Error::config("sampler needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let v = field(&z, k as f64 * dt)?;
        z = (&z + (v * dt)?)?;
    }
    Ok(z)
}

/// Initial noise of a sampler run.
pub fn sampler_noise(dims: &[usize], cfg: &SamplerConfig, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    randn(dims, &mut rng, dtype, device)
}

/// Generate a latent of shape `dims` under `cond`.
pub fn euler_sample(model: &EditModel, cond: &LatentConditions, dims: &[usize], cfg: &SamplerConfig) -> Result<Tensor> {
    cfg.validate()?;
    let z0 = sampler_noise(dims, cfg, model.dtype(), model.device())?;
    euler_integrate(&z0, cfg.steps, |z, t| Ok(model.forward(z, t, cond)?.velocity.detach()))
}
