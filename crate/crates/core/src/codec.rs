//! Fixed linear patch codec standing in for a frozen video autoencoder.
//!
//! A clip is cut into `temporal_factor x spatial_factor x spatial_factor`
//! RGB patches. Each patch vector is projected onto 16 orthonormal
//! directions: the lowest-frequency separable cosine components of the
//! patch (per color channel first, then luminance), mixed by a seeded
//! random rotation. Decoding applies the transpose, which is the exact
//! pseudo-inverse, so content inside the retained subspace (for example
//! clips that are constant on each patch) reconstructs exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{Image, VideoClip};

pub const LATENT_CHANNELS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub temporal_factor: usize,
    pub spatial_factor: usize,
    pub latent_channels: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { temporal_factor: 4, spatial_factor: 8, latent_channels: LATENT_CHANNELS, seed: 0 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_factor == 0 {
            return Err(Error::config("temporal_factor must be >= 1"));
        }
        if self.spatial_factor == 0 {
            return Err(Error::config("spatial_factor must be >= 1"));
        }
        if self.latent_channels != LATENT_CHANNELS {
            return Err(Error::config(format!(
                "latent_channels must be {LATENT_CHANNELS}, got {}",
                self.latent_channels
            )));
        }
        if self.patch_len() < LATENT_CHANNELS {
            return Err(Error::config(format!(
                "patch of {} values cannot carry {LATENT_CHANNELS} channels",
                self.patch_len()
            )));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.temporal_factor * self.spatial_factor * self.spatial_factor * 3
    }

    pub fn latent_dims(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let check = |axis: &'static str, n: usize, f: usize| {
            if n == 0 || n % f != 0 {
                Err(Error::Dimension { axis, msg: format!("{n} is not a positive multiple of {f}") })
            } else {
                Ok(n / f)
            }
        };
        Ok((
            check("frames", frames, self.temporal_factor)?,
            check("height", height, self.spatial_factor)?,
            check("width", width, self.spatial_factor)?,
        ))
    }
}

/// Latent grid `(t, h, w, channels)`, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
    /// `(frames, height, width)` of the pixel clip this came from.
    pub source_dims: (usize, usize, usize),
}

impl LatentVideo {
    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c, data: vec![0.0; t * h * w * c], source_dims: (0, 0, 0) }
    }

    pub fn from_vec(t: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != t * h * w * c {
            return Err(Error::shape(format!("latent buffer of {} values does not match {t}x{h}x{w}x{c}", data.len())));
        }
        Ok(Self { t, h, w, c, data, source_dims: (0, 0, 0) })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, self.c)
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize, j: usize, ch: usize) -> f32 {
        self.data[((t * self.h + i) * self.w + j) * self.c + ch]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel concatenation `[self ; other]`.
    pub fn concat_channels(&self, other: &LatentVideo) -> Result<LatentVideo> {
        if (self.t, self.h, self.w) != (other.t, other.h, other.w) {
            return Err(Error::shape(format!(
                "cannot concatenate latents {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let c = self.c + other.c;
        let mut data = Vec::with_capacity(self.t * self.h * self.w * c);
        for (a, b) in self.data.chunks_exact(self.c).zip(other.data.chunks_exact(other.c)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(LatentVideo { t: self.t, h: self.h, w: self.w, c, data, source_dims: self.source_dims })
    }

    pub fn axpy(&self, a: f32, other: &LatentVideo) -> LatentVideo {
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x + a * y).collect();
        LatentVideo { data, ..self.clone() }
    }

    pub fn scale(&self, a: f32) -> LatentVideo {
        LatentVideo { data: self.data.iter().map(|x| a * x).collect(), ..self.clone() }
    }

    pub fn to_tensor(&self, device: &candle_core::Device) -> Result<candle_core::Tensor> {
        Ok(candle_core::Tensor::from_vec(self.data.clone(), (self.t, self.h, self.w, self.c), device)?)
    }

    pub fn from_tensor(t: &candle_core::Tensor) -> Result<LatentVideo> {
        let (a, b, c, d) = t.dims4()?;
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        LatentVideo::from_vec(a, b, c, d, data)
    }
}

/// The fixed projection. Cheap to build; construct once and reuse.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    cfg: CodecConfig,
    /// Row-major `(16, patch_len)`, orthonormal rows.
    basis: Vec<f64>,
    scale: f64,
}

fn dct(k: usize, n: usize, len: usize) -> f64 {
    if k == 0 {
        (1.0 / len as f64).sqrt()
    } else {
        (2.0 / len as f64).sqrt()
            * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * len) as f64).cos()
    }
}

fn gram_schmidt_push(basis: &mut Vec<Vec<f64>>, mut v: Vec<f64>) -> bool {
    for b in basis.iter() {
        let d: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
        for (vi, bi) in v.iter_mut().zip(b) {
            *vi -= d * bi;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-9 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    basis.push(v);
    true
}

impl LatentCodec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let (tf, sf) = (cfg.temporal_factor, cfg.spatial_factor);
        let p = cfg.patch_len();

        let mut freqs: Vec<(usize, usize, usize)> = Vec::new();
        for kt in 0..tf {
            for ky in 0..sf {
                for kx in 0..sf {
                    freqs.push((kt, ky, kx));
                }
            }
        }
        freqs.sort_by_key(|&(a, b, c)| (a + b + c, a, b, c));

        let separable = |(kt, ky, kx): (usize, usize, usize), color: [f64; 3]| {
            let mut v = vec![0.0; p];
            for dt in 0..tf {
                for dy in 0..sf {
                    for dx in 0..sf {
                        let s = dct(kt, dt, tf) * dct(ky, dy, sf) * dct(kx, dx, sf);
                        let o = ((dt * sf + dy) * sf + dx) * 3;
                        for c in 0..3 {
                            v[o + c] = s * color[c];
                        }
                    }
                }
            }
            v
        };
        const EYE: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let gray = [1.0 / 3f64.sqrt(); 3];

        // per-color components up to first order, then luminance, then whatever remains
        let mut candidates = Vec::new();
        for &f in freqs.iter().filter(|f| f.0 + f.1 + f.2 <= 1) {
            for c in EYE {
                candidates.push(separable(f, c));
            }
        }
        for &f in freqs.iter().filter(|f| f.0 + f.1 + f.2 >= 2) {
            candidates.push(separable(f, gray));
        }
        for &f in freqs.iter().filter(|f| f.0 + f.1 + f.2 >= 2) {
            for c in EYE {
                candidates.push(separable(f, c));
            }
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(LATENT_CHANNELS);
        for c in candidates {
            if rows.len() == LATENT_CHANNELS {
                break;
            }
            gram_schmidt_push(&mut rows, c);
        }
        debug_assert_eq!(rows.len(), LATENT_CHANNELS);

        // seeded rotation of the retained subspace
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(LATENT_CHANNELS);
        while q.len() < LATENT_CHANNELS {
            let g: Vec<f64> = (0..LATENT_CHANNELS).map(|_| StandardNormal.sample(&mut rng)).collect();
            gram_schmidt_push(&mut q, g);
        }
        let mut basis = vec![0.0; LATENT_CHANNELS * p];
        for (k, qk) in q.iter().enumerate() {
            for (m, row) in rows.iter().enumerate() {
                for (dst, src) in basis[k * p..(k + 1) * p].iter_mut().zip(row) {
                    *dst += qk[m] * src;
                }
            }
        }
        let scale = 2.0 / ((tf * sf * sf) as f64).sqrt();
        Ok(Self { cfg, basis, scale })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Projection rows scaled as applied by `encode`, `(16, patch_len)`.
    pub fn projection(&self) -> Vec<f64> {
        self.basis.iter().map(|b| b * self.scale).collect()
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<LatentVideo> {
        let (lt, lh, lw) = self.cfg.latent_dims(clip.frames, clip.height, clip.width)?;
        let (tf, sf) = (self.cfg.temporal_factor, self.cfg.spatial_factor);
        let p = self.cfg.patch_len();
        let mut out = vec![0f32; lt * lh * lw * LATENT_CHANNELS];
        let mut patch = vec![0f64; p];
        for t in 0..lt {
            for i in 0..lh {
                for j in 0..lw {
                    for dt in 0..tf {
                        for dy in 0..sf {
                            let src = clip.offset_of(t * tf + dt, i * sf + dy, j * sf);
                            let dst = (dt * sf + dy) * sf * 3;
                            for (d, s) in patch[dst..dst + sf * 3].iter_mut().zip(&clip.data[src..src + sf * 3]) {
                                *d = *s as f64;
                            }
                        }
                    }
                    let o = ((t * lh + i) * lw + j) * LATENT_CHANNELS;
                    for k in 0..LATENT_CHANNELS {
                        let row = &self.basis[k * p..(k + 1) * p];
                        let dot: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                        out[o + k] = (dot * self.scale) as f32;
                    }
                }
            }
        }
        Ok(LatentVideo {
            t: lt,
            h: lh,
            w: lw,
            c: LATENT_CHANNELS,
            data: out,
            source_dims: (clip.frames, clip.height, clip.width),
        })
    }

    /// Encode a still image as a one-step latent (the image repeated over one temporal patch).
    pub fn encode_image(&self, image: &Image) -> Result<LatentVideo> {
        self.encode(&VideoClip::repeat_image(image, self.cfg.temporal_factor))
    }

    /// Least-squares reconstruction, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &LatentVideo) -> Result<VideoClip> {
        Ok(self.decode_unclamped(latent)?.clamp01())
    }

    pub fn decode_unclamped(&self, latent: &LatentVideo) -> Result<VideoClip> {
        if latent.c != LATENT_CHANNELS {
            return Err(Error::shape(format!("latent has {} channels, expected {LATENT_CHANNELS}", latent.c)));
        }
        let (tf, sf) = (self.cfg.temporal_factor, self.cfg.spatial_factor);
        let p = self.cfg.patch_len();
        let (frames, height, width) = (latent.t * tf, latent.h * sf, latent.w * sf);
        let mut clip = VideoClip::filled(frames, height, width, [0.0; 3]);
        let mut patch = vec![0f64; p];
        for t in 0..latent.t {
            for i in 0..latent.h {
                for j in 0..latent.w {
                    patch.iter_mut().for_each(|v| *v = 0.0);
                    let o = ((t * latent.h + i) * latent.w + j) * LATENT_CHANNELS;
                    for k in 0..LATENT_CHANNELS {
                        let z = latent.data[o + k] as f64 / self.scale;
                        for (d, b) in patch.iter_mut().zip(&self.basis[k * p..(k + 1) * p]) {
                            *d += z * b;
                        }
                    }
                    for dt in 0..tf {
                        for dy in 0..sf {
                            let dst = clip.offset_of(t * tf + dt, i * sf + dy, j * sf);
                            let src = (dt * sf + dy) * sf * 3;
                            for (d, s) in clip.data[dst..dst + sf * 3].iter_mut().zip(&patch[src..src + sf * 3]) {
                                *d = *s as f32;
                            }
                        }
                    }
                }
            }
        }
        Ok(clip)
    }
}

impl VideoClip {
    #[inline]
    pub(crate) fn offset_of(&self, t: usize, y: usize, x: usize) -> usize {
        ((t * self.height + y) * self.width + x) * 3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn codec() -> LatentCodec {
        LatentCodec::new(CodecConfig::default()).unwrap()
    }

    fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> VideoClip {
        let data = (0..t * h * w * 3).map(|_| rng.random::<f32>()).collect();
        VideoClip::from_vec(t, h, w, data).unwrap()
    }

    /// Constant within each temporal x spatial patch.
    fn blocky_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> VideoClip {
        let mut clip = VideoClip::filled(t, h, w, [0.0; 3]);
        for bt in 0..t / 4 {
            for by in 0..h / 8 {
                for bx in 0..w / 8 {
                    let c = [rng.random::<f32>(), rng.random(), rng.random()];
                    for dt in 0..4 {
                        for dy in 0..8 {
                            for dx in 0..8 {
                                clip.set(bt * 4 + dt, by * 8 + dy, bx * 8 + dx, c);
                            }
                        }
                    }
                }
            }
        }
        clip
    }

    #[test]
    fn shape_contract_over_grid() {
        let c = codec();
        for t in [4, 8, 16] {
            for h in [8, 16, 64] {
                for w in [8, 24, 64] {
                    let l = c.encode(&VideoClip::filled(t, h, w, [0.3; 3])).unwrap();
                    assert_eq!(l.dims(), (t / 4, h / 8, w / 8, 16));
                    assert_eq!(l.source_dims, (t, h, w));
                }
            }
        }
        let l = c.encode(&VideoClip::filled(16, 64, 64, [0.0; 3])).unwrap();
        assert_eq!(l.dims(), (4, 8, 8, 16));
    }

    #[test]
    fn non_divisible_dims_name_the_axis() {
        let c = codec();
        match c.encode(&VideoClip::filled(6, 64, 64, [0.0; 3])) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "frames"),
            other => panic!("unexpected {other:?}"),
        }
        match c.encode(&VideoClip::filled(8, 64, 60, [0.0; 3])) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "width"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_clip_maps_to_zero_bias() {
        let l = codec().encode(&VideoClip::filled(4, 16, 16, [0.0; 3])).unwrap();
        assert!(l.data.iter().all(|&v| v == 0.0));
        let d = codec().decode(&LatentVideo::zeros(1, 2, 2, 16)).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        assert!(matches!(codec().decode(&LatentVideo::zeros(1, 1, 1, 8)), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(LatentCodec::new(CodecConfig { temporal_factor: 0, ..Default::default() }).is_err());
        assert!(LatentCodec::new(CodecConfig { latent_channels: 8, ..Default::default() }).is_err());
        assert!(LatentCodec::new(CodecConfig { temporal_factor: 1, spatial_factor: 2, ..Default::default() }).is_err());
    }

    /// Pseudo-inverse oracle: build the dense projection, form P^+ = P^T (P P^T)^-1 by
    /// solving the normal equations directly, and check it reconstructs blocky clips.
    #[test]
    fn pseudo_inverse_oracle_reconstructs_blocky_clips() {
        let c = codec();
        let p = c.config().patch_len();
        let proj = c.projection();
        // Gram matrix G = P P^T (16x16), invert by Gauss-Jordan.
        let n = LATENT_CHANNELS;
        let mut g = vec![0f64; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = (0..p).map(|k| proj[a * p + k] * proj[b * p + k]).sum();
            }
        }
        let mut inv = vec![0f64; n * n];
        for a in 0..n {
            inv[a * n + a] = 1.0;
        }
        for col in 0..n {
            let piv = g[col * n + col];
            assert!(piv.abs() > 1e-9, "projection is rank deficient");
            for k in 0..n {
                g[col * n + k] /= piv;
                inv[col * n + k] /= piv;
            }
            for r in 0..n {
                if r != col {
                    let f = g[r * n + col];
                    for k in 0..n {
                        g[r * n + k] -= f * g[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = blocky_clip(&mut rng, 8, 16, 24);
        let lat = c.encode(&clip).unwrap();
        // oracle reconstruction of the first patch
        let z = &lat.data[0..n];
        let mut y = vec![0f64; n];
        for a in 0..n {
            y[a] = (0..n).map(|b| inv[a * n + b] * z[b] as f64).sum();
        }
        let oracle: Vec<f64> = (0..p).map(|k| (0..n).map(|a| proj[a * p + k] * y[a]).sum()).collect();
        let first = clip.get(0, 0, 0);
        for (k, v) in oracle.iter().enumerate() {
            assert!((v - first[k % 3] as f64).abs() < 1e-5);
        }
        let rec = c.decode(&lat).unwrap();
        let max_err = rec.data.iter().zip(&clip.data).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(max_err < 1e-5, "max err {max_err}");
    }

    #[test]
    fn blocky_roundtrip_psnr_exceeds_30db() {
        let c = codec();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4 {
            let clip = blocky_clip(&mut rng, 16, 64, 64);
            let rec = c.decode(&c.encode(&clip).unwrap()).unwrap();
            let mse: f64 = rec.data.iter().zip(&clip.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
                / clip.data.len() as f64;
            let psnr = if mse == 0.0 { 99.0 } else { 10.0 * (1.0 / mse).log10() };
            assert!(psnr >= 30.0, "psnr {psnr}");
        }
    }

    #[test]
    fn linearity_and_decode_additivity() {
        let c = codec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_clip(&mut rng, 4, 16, 16);
        let y = random_clip(&mut rng, 4, 16, 16);
        let (a, b) = (0.3f32, 0.6f32);
        let mix = VideoClip::from_vec(4, 16, 16, x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = c.encode(&mix).unwrap();
        let (ex, ey) = (c.encode(&x).unwrap(), c.encode(&y).unwrap());
        for k in 0..lhs.data.len() {
            assert!((lhs.data[k] - (a * ex.data[k] + b * ey.data[k])).abs() < 1e-5);
        }
        // decode(encode(x') + encode(y')) = clamp(decode(encode(x' + y'))) with x'+y' in range
        let xs = VideoClip::from_vec(4, 16, 16, x.data.iter().map(|v| v * 0.5).collect()).unwrap();
        let ys = VideoClip::from_vec(4, 16, 16, y.data.iter().map(|v| v * 0.5).collect()).unwrap();
        let sum = VideoClip::from_vec(4, 16, 16, xs.data.iter().zip(&ys.data).map(|(p, q)| p + q).collect()).unwrap();
        let exs = c.encode(&xs).unwrap();
        let l = exs.axpy(1.0, &c.encode(&ys).unwrap());
        let d1 = c.decode(&l).unwrap();
        let d2 = c.decode(&c.encode(&sum).unwrap()).unwrap();
        for k in 0..d1.data.len() {
            assert!((d1.data[k] - d2.data[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_clip(&mut rng, 4, 16, 16);
        let a = LatentCodec::new(CodecConfig { seed: 9, ..Default::default() }).unwrap();
        let b = LatentCodec::new(CodecConfig { seed: 9, ..Default::default() }).unwrap();
        let o = LatentCodec::new(CodecConfig { seed: 10, ..Default::default() }).unwrap();
        let (la, lb, lo) = (a.encode(&x).unwrap(), b.encode(&x).unwrap(), o.encode(&x).unwrap());
        assert!(la.data.iter().zip(&lb.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_ne!(la.data, lo.data);
    }

    #[test]
    fn encode_image_matches_repeated_clip() {
        let c = codec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::from_vec(64, 64, (0..64 * 64 * 3).map(|_| rng.random()).collect()).unwrap();
        let li = c.encode_image(&img).unwrap();
        assert_eq!(li.dims(), (1, 8, 8, 16));
        let lc = c.encode(&VideoClip::repeat_image(&img, 4)).unwrap();
        assert_eq!(li.data, lc.data);
    }

    #[test]
    fn projection_has_full_rank() {
        // Orthonormality of the scaled rows implies rank 16 (injective on the retained subspace).
        let c = codec();
        let p = c.config().patch_len();
        let proj = c.projection();
        let s2 = proj[0..p].iter().map(|v| v * v).sum::<f64>();
        for a in 0..16 {
            for b in 0..16 {
                let d: f64 = (0..p).map(|k| proj[a * p + k] * proj[b * p + k]).sum();
                let expect = if a == b { s2 } else { 0.0 };
                assert!((d - expect).abs() < 1e-9);
            }
        }
        let red = Image::filled(64, 64, [1.0, 0.0, 0.0]);
        let blue = Image::filled(64, 64, [0.0, 0.0, 1.0]);
        assert_ne!(c.encode_image(&red).unwrap().data, c.encode_image(&blue).unwrap().data);
    }
}
