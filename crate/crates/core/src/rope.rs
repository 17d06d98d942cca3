//! Three-axis rotary positions `(t, i, j)` for video and reference-image tokens.
//!
//! Video tokens sit at `(t, i, j)` on the latent token grid. Reference-image
//! tokens sit one step before the first frame, at `t = -1`, with the spatial
//! index shifted by the grid size: `(-1, i + w, j + h)`. The shift is applied
//! exactly as written, width onto the row index and height onto the column
//! index.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RopeIndex {
    pub t: i64,
    pub i: i64,
    pub j: i64,
}

impl RopeIndex {
    pub const fn new(t: i64, i: i64, j: i64) -> Self {
        Self { t, i, j }
    }

    pub fn offset(self, d: i64) -> Self {
        Self { t: self.t + d, i: self.i + d, j: self.j + d }
    }
}

/// Channel split of one attention head across the three axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeAllocation {
    pub head_dim: usize,
    pub d_t: usize,
    pub d_i: usize,
    pub d_j: usize,
    pub base: f64,
}

impl RopeAllocation {
    /// `(16, 24, 24)` for a 64-wide head, scaled proportionally otherwise.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim < 6 || head_dim % 2 != 0 {
            return Err(Error::config(format!("head_dim {head_dim} cannot be split over three even axes")));
        }
        let d_t = (2 * ((head_dim as f64 / 8.0).round() as usize)).max(2);
        let rest = head_dim - d_t;
        let half = rest / 2;
        let (d_i, d_j) = if half % 2 == 0 { (half, half) } else { (half + 1, half - 1) };
        let a = Self { head_dim, d_t, d_i, d_j, base: 10_000.0 };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_t + self.d_i + self.d_j != self.head_dim {
            return Err(Error::config(format!(
                "axis channels {}+{}+{} do not sum to head_dim {}",
                self.d_t, self.d_i, self.d_j, self.head_dim
            )));
        }
        if self.d_t % 2 != 0 || self.d_i % 2 != 0 || self.d_j % 2 != 0 {
            return Err(Error::config("every axis needs an even channel count"));
        }
        if self.base <= 1.0 {
            return Err(Error::config("rope base must exceed 1"));
        }
        Ok(())
    }

    /// Rotation angle of every channel pair for one position.
    pub fn angles(&self, idx: RopeIndex) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (pos, d) in [(idx.t, self.d_t), (idx.i, self.d_i), (idx.j, self.d_j)] {
            for k in 0..d / 2 {
                let freq = self.base.powf(-(2.0 * k as f64) / d as f64);
                out.push(pos as f64 * freq);
            }
        }
        out
    }
}

/// Row-major `(t, i, j)` indices of a `frames x h x w` token grid.
pub fn video_indices(frames: usize, h: usize, w: usize) -> Result<Vec<RopeIndex>> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("video grid ({frames},{h},{w}) has a zero dimension")));
    }
    let mut out = Vec::with_capacity(frames * h * w);
    for t in 0..frames {
        for i in 0..h {
            for j in 0..w {
                out.push(RopeIndex::new(t as i64, i as i64, j as i64));
            }
        }
    }
    Ok(out)
}

/// Indices of an `h x w` reference-image token grid at frame -1.
///
/// With `shift`, token `(i, j)` maps to `(-1, i + w, j + h)`; without it, to
/// `(-1, i, j)` (the ablation arm).
pub fn reference_indices(h: usize, w: usize, shift: bool) -> Result<Vec<RopeIndex>> {
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("reference grid ({h},{w}) has a zero dimension")));
    }
    let (di, dj) = if shift { (w as i64, h as i64) } else { (0, 0) };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            out.push(RopeIndex::new(-1, i + di, j + dj));
        }
    }
    Ok(out)
}

/// Reference rotation on plain vectors: interleaved pairs `(2m, 2m+1)` rotated
/// by the pair's angle.
pub fn apply_rotary(vectors: &[Vec<f32>], indices: &[RopeIndex], alloc: &RopeAllocation) -> Result<Vec<Vec<f32>>> {
    alloc.validate()?;
    if vectors.len() != indices.len() {
        return Err(Error::shape(format!("{} vectors but {} indices", vectors.len(), indices.len())));
    }
    vectors
        .iter()
        .zip(indices)
        .map(|(v, &idx)| {
            if v.len() != alloc.head_dim {
                return Err(Error::shape(format!("vector of dim {} but head_dim {}", v.len(), alloc.head_dim)));
            }
            let mut out = v.clone();
            for (m, a) in alloc.angles(idx).into_iter().enumerate() {
                let (s, c) = a.sin_cos();
                let (x0, x1) = (v[2 * m] as f64, v[2 * m + 1] as f64);
                out[2 * m] = (x0 * c - x1 * s) as f32;
                out[2 * m + 1] = (x0 * s + x1 * c) as f32;
            }
            Ok(out)
        })
        .collect()
}

/// Precomputed `(len, head_dim / 2)` cosine and sine tables for one position list.
#[derive(Debug, Clone)]
pub struct RotaryTables {
    pub cos: Tensor,
    pub sin: Tensor,
}

impl RotaryTables {
    pub fn new(indices: &[RopeIndex], alloc: &RopeAllocation, dtype: DType, device: &Device) -> Result<Self> {
        alloc.validate()?;
        let half = alloc.head_dim / 2;
        let mut cos = Vec::with_capacity(indices.len() * half);
        let mut sin = Vec::with_capacity(indices.len() * half);
        for &idx in indices {
            for a in alloc.angles(idx) {
                let (s, c) = a.sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        let n = indices.len();
        Ok(Self {
            cos: Tensor::from_vec(cos, (n, half), device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (n, half), device)?.to_dtype(dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.cos.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rotate `x` of shape `(len, heads, head_dim)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, heads, hd) = x.dims3()?;
        if n != self.len() || hd != 2 * self.cos.dims()[1] {
            return Err(Error::shape(format!(
                "rotary tables ({}, {}) do not fit input ({n}, {heads}, {hd})",
                self.len(),
                self.cos.dims()[1]
            )));
        }
        let pairs = x.reshape((n, heads, hd / 2, 2))?;
        let x0 = pairs.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
        let x1 = pairs.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
        let cos = self.cos.unsqueeze(1)?;
        let sin = self.sin.unsqueeze(1)?;
        let r0 = (x0.broadcast_mul(&cos)? - x1.broadcast_mul(&sin)?)?;
        let r1 = (x0.broadcast_mul(&sin)? + x1.broadcast_mul(&cos)?)?;
        Ok(Tensor::stack(&[r0, r1], D::Minus1)?.reshape((n, heads, hd))?)
    }
}
