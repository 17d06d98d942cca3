//! Named trainable tensors with seed-deterministic initialization.
//!
//! Every parameter draws its initial values from a generator keyed by
//! `(store seed, parameter name)`, so initialization does not depend on
//! construction order and two models that share a parameter name start
//! from the same values.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

pub(crate) fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and toolchains
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    trainable: BTreeMap<String, bool>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self { vars: BTreeMap::new(), trainable: BTreeMap::new(), seed, dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, var: Var) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        self.trainable.insert(name.to_string(), true);
        Ok(t)
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-b, b).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, Var::from_tensor(&t)?)
    }

    /// Register a parameter initialized from existing values (weight inheritance).
    pub fn init_from(&mut self, name: &str, value: &Tensor) -> Result<Tensor> {
        let t = value.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?;
        self.insert(name, Var::from_tensor(&t)?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (k, v) in self.trainable.iter_mut() {
            if k.starts_with(prefix) {
                *v = trainable;
            }
        }
    }

    /// `(name, var)` pairs for the optimizer, in name order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| self.trainable[*k])
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn param_count_prefix(&self, prefix: &str) -> usize {
        self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Overwrite values from a name -> tensor map; every name must exist with a matching shape.
    pub fn load_tensors(&self, map: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = map.get(name).ok_or_else(|| Error::NotFound(format!("tensor `{name}` missing from checkpoint")))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Add `Normal(0, std)` noise to every parameter, breaking zero inits
    /// (for gradient checks, where a zero layer hides everything behind it).
    pub fn perturb_all(&self, seed: u64, std: f64) -> Result<()> {
        let d = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        for (name, var) in &self.vars {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            let noise: Vec<f64> = (0..var.elem_count()).map(|_| d.sample(&mut rng)).collect();
            let noise = Tensor::from_vec(noise, var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&(var.as_tensor() + noise)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        self.load_tensors(&map)
    }
}
