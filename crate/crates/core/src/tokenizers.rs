//! Latent tokenizers and the pose feature extractor.
//!
//! A tokenizer is a non-overlapping 3D convolution (kernel = stride =
//! `(pt, ph, pw)`), implemented as patchify followed by a linear map. Weight
//! columns follow the convolution kernel layout `(channel, dt, dh, dw)`.
//!
//! Three tokenizers feed the backbone:
//! * `k1` embeds the noisy latent,
//! * `k2` embeds `[masked source ; mask]` (32 channels) and starts as `k1`
//!   with zero columns for the mask half,
//! * `k3` embeds pose features and starts as a copy of `k1`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::codec::LATENT_CHANNELS;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Default for Patch {
    fn default() -> Self {
        Self { pt: 1, ph: 2, pw: 2 }
    }
}

impl Patch {
    pub fn volume(&self) -> usize {
        self.pt * self.ph * self.pw
    }

    /// Token grid `(t, h, w)` of a latent grid.
    pub fn grid(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let check = |axis: &'static str, n: usize, p: usize| {
            if n == 0 || p == 0 || n % p != 0 {
                Err(Error::Dimension { axis, msg: format!("latent extent {n} not divisible by patch {p}") })
            } else {
                Ok(n / p)
            }
        };
        Ok((check("t", t, self.pt)?, check("h", h, self.ph)?, check("w", w, self.pw)?))
    }
}

/// `(T, H, W, C)` -> `(tokens, C * pt * ph * pw)` in row-major `(t, i, j)` token order.
pub fn patchify(latent: &Tensor, patch: Patch) -> Result<Tensor> {
    let (t, h, w, c) = latent.dims4()?;
    let (gt, gh, gw) = patch.grid(t, h, w)?;
    let x = latent
        .reshape(vec![gt, patch.pt, gh, patch.ph, gw, patch.pw, c])?
        .permute(vec![0, 2, 4, 6, 1, 3, 5])?
        .reshape((gt * gh * gw, c * patch.volume()))?;
    Ok(x)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, grid: (usize, usize, usize), patch: Patch, channels: usize) -> Result<Tensor> {
    let (gt, gh, gw) = grid;
    let (n, f) = tokens.dims2()?;
    if n != gt * gh * gw || f != channels * patch.volume() {
        return Err(Error::shape(format!(
            "cannot unpatchify ({n}, {f}) onto grid {grid:?} with {channels} channels"
        )));
    }
    Ok(tokens
        .reshape(vec![gt, gh, gw, channels, patch.pt, patch.ph, patch.pw])?
        .permute(vec![0, 4, 1, 5, 2, 6, 3])?
        .reshape((gt * patch.pt, gh * patch.ph, gw * patch.pw, channels))?)
}

#[derive(Debug, Clone)]
pub struct VideoTokenizer {
    pub in_channels: usize,
    pub patch: Patch,
    pub out_dim: usize,
    /// `(out_dim, in_channels * pt * ph * pw)`
    pub weight: Tensor,
    /// `(out_dim)`
    pub bias: Tensor,
}

impl VideoTokenizer {
    pub fn new(ps: &mut ParamStore, name: &str, in_channels: usize, patch: Patch, out_dim: usize) -> Result<Self> {
        let fan_in = in_channels * patch.volume();
        let weight = ps.init(&format!("{name}.weight"), &[out_dim, fan_in], Init::FanIn(fan_in))?;
        let bias = ps.init(&format!("{name}.bias"), &[out_dim], Init::FanIn(fan_in))?;
        Ok(Self { in_channels, patch, out_dim, weight, bias })
    }

    /// Register a trainable copy of `src` under `name`.
    pub fn copy_of(ps: &mut ParamStore, name: &str, src: &VideoTokenizer) -> Result<Self> {
        Ok(Self {
            weight: ps.init_from(&format!("{name}.weight"), &src.weight)?,
            bias: ps.init_from(&format!("{name}.bias"), &src.bias)?,
            ..src.clone()
        })
    }

    /// Register `weight`/`bias` values built elsewhere under `name`.
    pub fn register(self, ps: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: ps.init_from(&format!("{name}.weight"), &self.weight)?,
            bias: ps.init_from(&format!("{name}.bias"), &self.bias)?,
            ..self
        })
    }

    pub fn tokenize(&self, latent: &Tensor) -> Result<Tensor> {
        let c = latent.dims4()?.3;
        if c != self.in_channels {
            return Err(Error::shape(format!("tokenizer expects {} channels, latent has {c}", self.in_channels)));
        }
        let x = patchify(latent, self.patch)?;
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Widen a 16-channel tokenizer to 32 input channels: the first 16 channel
/// columns keep the original weights, the new 16 are exactly zero, bias copied.
pub fn build_fusion_tokenizer(k1: &VideoTokenizer) -> Result<VideoTokenizer> {
    if k1.in_channels != LATENT_CHANNELS {
        return Err(Error::shape(format!(
            "fusion tokenizer needs a {LATENT_CHANNELS}-channel source tokenizer, got {}",
            k1.in_channels
        )));
    }
    let v = k1.patch.volume();
    let w = k1.weight.detach().reshape((k1.out_dim, LATENT_CHANNELS, v))?;
    let weight = Tensor::cat(&[&w, &w.zeros_like()?], 1)?.reshape((k1.out_dim, 2 * LATENT_CHANNELS * v))?;
    Ok(VideoTokenizer {
        in_channels: 2 * LATENT_CHANNELS,
        patch: k1.patch,
        out_dim: k1.out_dim,
        weight,
        bias: k1.bias.detach().copy()?,
    })
}

/// Fused mask-condition tokens: `k2([masked_source ; mask])`.
pub fn tokenize_mask_pair(masked_source: &Tensor, mask: &Tensor, k2: &VideoTokenizer) -> Result<Tensor> {
    if masked_source.dims() != mask.dims() {
        return Err(Error::shape(format!(
            "masked source {:?} and mask {:?} latents differ",
            masked_source.dims(),
            mask.dims()
        )));
    }
    k2.tokenize(&Tensor::cat(&[masked_source, mask], D::Minus1)?)
}

/// Two channel-preserving 3x3 convolutions per latent frame; the second one
/// starts at zero so the extractor outputs exactly zero at initialization.
#[derive(Debug, Clone)]
pub struct PoseNet {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
}

impl PoseNet {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let fan_in = channels * 9;
        Ok(Self {
            conv1_w: ps.init(&format!("{name}.conv1.weight"), &[channels, channels, 3, 3], Init::FanIn(fan_in))?,
            conv1_b: ps.init(&format!("{name}.conv1.bias"), &[channels], Init::FanIn(fan_in))?,
            conv2_w: ps.init(&format!("{name}.conv2.weight"), &[channels, channels, 3, 3], Init::Zeros)?,
            conv2_b: ps.init(&format!("{name}.conv2.bias"), &[channels], Init::Zeros)?,
        })
    }

    /// `(T, H, W, C)` -> `(T, H, W, C)`.
    pub fn forward(&self, latent: &Tensor) -> Result<Tensor> {
        let c = self.conv1_w.dims()[0];
        if latent.dims4()?.3 != c {
            return Err(Error::shape(format!("posenet expects {c} channels")));
        }
        let x = latent.permute((0, 3, 1, 2))?.contiguous()?;
        let b1 = self.conv1_b.reshape((1, c, 1, 1))?;
        let b2 = self.conv2_b.reshape((1, c, 1, 1))?;
        let h = x.conv2d(&self.conv1_w, 1, 1, 1, 1)?.broadcast_add(&b1)?.silu()?;
        let y = h.conv2d(&self.conv2_w, 1, 1, 1, 1)?.broadcast_add(&b2)?;
        Ok(y.permute((0, 2, 3, 1))?.contiguous()?)
    }
}

/// Pose tokens `k3(posenet(pose_latent))`.
pub fn pose_tokens(pose_latent: &Tensor, posenet: &PoseNet, k3: &VideoTokenizer) -> Result<Tensor> {
    k3.tokenize(&posenet.forward(pose_latent)?)
}
