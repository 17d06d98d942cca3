//! Minimal layers over candle tensors. Every forward works on unbatched
//! `(tokens, features)` matrices.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::FanIn(d_in), true)
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::Zeros, true)
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = ps.init(&format!("{name}.weight"), &[d_out, d_in], init)?;
        let bias = if bias {
            let b_init = match init {
                Init::Zeros => Init::Zeros,
                _ => Init::FanIn(d_in),
            };
            Some(ps.init(&format!("{name}.bias"), &[d_out], b_init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Parameter-free layer norm over the last dimension.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// `x * (1 + scale) + shift` with `(1, D)` modulation rows.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Scaled dot-product attention over `(len, heads, head_dim)` inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, heads, hd) = q.dims3()?;
    let q = q.transpose(0, 1)?.contiguous()?;
    let k = k.transpose(0, 1)?.contiguous()?;
    let v = v.transpose(0, 1)?.contiguous()?;
    let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let p = candle_nn::ops::softmax(&scores, candle_core::D::Minus1)?;
    Ok(p.matmul(&v)?.transpose(0, 1)?.reshape((n, heads * hd))?)
}
