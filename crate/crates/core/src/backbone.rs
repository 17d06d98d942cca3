//! Micro MM-DiT denoiser.
//!
//! Dual-stream blocks keep separate weights for text and visual tokens and
//! attend jointly over `[text ; visual]`; single-stream blocks share weights
//! over the concatenation. Rotary positions apply to visual queries and keys
//! only. Every block is modulated by the timestep embedding (adaLN) with
//! zero-initialized gates, so each block starts as the identity.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, layer_norm, modulate, Linear, Mlp};
use crate::params::{Init, ParamStore};
use crate::rope::RotaryTables;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionVariant {
    /// Pose tokens summed straight onto the video tokens.
    TokenAdd,
    /// Adapter copies of the first blocks emitting zero-initialized residuals.
    Controlnet,
    /// PoseNet, pose tokenizer and a zero-initialized projection before summation.
    Fusion,
}

impl std::str::FromStr for InjectionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_add" => Ok(Self::TokenAdd),
            "controlnet" => Ok(Self::Controlnet),
            "fusion" => Ok(Self::Fusion),
            other => Err(Error::config(format!("unknown injection variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for InjectionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TokenAdd => "token_add",
            Self::Controlnet => "controlnet",
            Self::Fusion => "fusion",
        })
    }
}

/// Sinusoidal features of `t * 1000` followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TimestepEmbedding {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, dim)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim)?,
            dim,
        })
    }

    pub fn sinusoid(t: f64, dim: usize) -> Vec<f64> {
        let half = dim / 2;
        let mut out = vec![0.0; dim];
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let a = t * 1000.0 * freq;
            out[k] = a.cos();
            out[half + k] = a.sin();
        }
        out
    }

    /// `(1, dim)` conditioning vector.
    pub fn forward(&self, t: f64, dtype: DType) -> Result<Tensor> {
        let s = Tensor::from_vec(Self::sinusoid(t, self.dim), (1, self.dim), self.fc1.weight.device())?.to_dtype(dtype)?;
        self.fc2.forward(&self.fc1.forward(&s)?.silu()?)
    }
}

/// Six `(1, D)` modulation rows: shift/scale/gate for attention and MLP.
fn modulation(lin: &Linear, c: &Tensor) -> Result<Vec<Tensor>> {
    Ok(lin.forward(&c.silu()?)?.chunk(6, D::Minus1)?)
}

#[derive(Debug, Clone)]
struct StreamWeights {
    modulation: Linear,
    qkv: Linear,
    out: Linear,
    mlp: Mlp,
}

impl StreamWeights {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            modulation: Linear::zeros(ps, &format!("{name}.modulation"), dim, 6 * dim)?,
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden)?,
        })
    }

    fn copy_from(ps: &mut ParamStore, name: &str, src: &StreamWeights) -> Result<Self> {
        let lin = |ps: &mut ParamStore, n: &str, l: &Linear| -> Result<Linear> {
            Ok(Linear {
                weight: ps.init_from(&format!("{name}.{n}.weight"), &l.weight)?,
                bias: match &l.bias {
                    Some(b) => Some(ps.init_from(&format!("{name}.{n}.bias"), b)?),
                    None => None,
                },
            })
        };
        Ok(Self {
            modulation: lin(ps, "modulation", &src.modulation)?,
            qkv: lin(ps, "qkv", &src.qkv)?,
            out: lin(ps, "out", &src.out)?,
            mlp: Mlp { fc1: lin(ps, "mlp.fc1", &src.mlp.fc1)?, fc2: lin(ps, "mlp.fc2", &src.mlp.fc2)? },
        })
    }

    /// Pre-attention: modulation rows and per-head q, k, v of shape `(n, heads, hd)`.
    fn qkv(&self, x: &Tensor, c: &Tensor, heads: usize) -> Result<(Vec<Tensor>, Tensor, Tensor, Tensor)> {
        let m = modulation(&self.modulation, c)?;
        let (n, d) = x.dims2()?;
        let h = modulate(&layer_norm(x, LN_EPS)?, &m[0], &m[1])?;
        let qkv = self.qkv.forward(&h)?.reshape((n, 3, heads, d / heads))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?;
        Ok((m, q, k, v))
    }

    fn post(&self, x: &Tensor, attn: &Tensor, m: &[Tensor]) -> Result<Tensor> {
        let x = (x + self.out.forward(attn)?.broadcast_mul(&m[2])?)?;
        let h = modulate(&layer_norm(&x, LN_EPS)?, &m[3], &m[4])?;
        Ok((&x + self.mlp.forward(&h)?.broadcast_mul(&m[5])?)?)
    }
}

fn rotate(q: &Tensor, rope: Option<&RotaryTables>) -> Result<Tensor> {
    match rope {
        Some(r) => r.apply(q),
        None => Ok(q.clone()),
    }
}

fn cat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims()[0] == 0 {
        return Ok(b.clone());
    }
    Ok(Tensor::cat(&[a, b], 0)?)
}

#[derive(Debug, Clone)]
pub enum Block {
    Dual { text: StreamWeightsPub, visual: StreamWeightsPub },
    Single(StreamWeightsPub),
}

/// Opaque per-stream weight bundle.
#[derive(Debug, Clone)]
pub struct StreamWeightsPub(StreamWeights);

impl Block {
    fn new_dual(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Block::Dual {
            text: StreamWeightsPub(StreamWeights::new(ps, &format!("{name}.text"), dim, hidden)?),
            visual: StreamWeightsPub(StreamWeights::new(ps, &format!("{name}.visual"), dim, hidden)?),
        })
    }

    fn new_single(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Block::Single(StreamWeightsPub(StreamWeights::new(ps, name, dim, hidden)?)))
    }

    fn copy_from(ps: &mut ParamStore, name: &str, src: &Block) -> Result<Self> {
        Ok(match src {
            Block::Dual { text, visual } => Block::Dual {
                text: StreamWeightsPub(StreamWeights::copy_from(ps, &format!("{name}.text"), &text.0)?),
                visual: StreamWeightsPub(StreamWeights::copy_from(ps, &format!("{name}.visual"), &visual.0)?),
            },
            Block::Single(w) => Block::Single(StreamWeightsPub(StreamWeights::copy_from(ps, name, &w.0)?)),
        })
    }

    /// One block over `(text, visual)`; `text` may have zero rows.
    pub fn forward(
        &self,
        text: &Tensor,
        visual: &Tensor,
        c: &Tensor,
        rope: Option<&RotaryTables>,
        heads: usize,
    ) -> Result<(Tensor, Tensor)> {
        let n_text = text.dims()[0];
        let n_vis = visual.dims()[0];
        match self {
            Block::Dual { text: tw, visual: vw } => {
                let (mv, qv, kv, vv) = vw.0.qkv(visual, c, heads)?;
                let (qv, kv) = (rotate(&qv, rope)?, rotate(&kv, rope)?);
                if n_text == 0 {
                    let a = attention(&qv, &kv, &vv)?;
                    return Ok((text.clone(), vw.0.post(visual, &a, &mv)?));
                }
                let (mt, qt, kt, vt) = tw.0.qkv(text, c, heads)?;
                let q = Tensor::cat(&[&qt, &qv], 0)?;
                let k = Tensor::cat(&[&kt, &kv], 0)?;
                let v = Tensor::cat(&[&vt, &vv], 0)?;
                let a = attention(&q, &k, &v)?;
                let at = a.narrow(0, 0, n_text)?;
                let av = a.narrow(0, n_text, n_vis)?;
                Ok((tw.0.post(text, &at, &mt)?, vw.0.post(visual, &av, &mv)?))
            }
            Block::Single(w) => {
                let x = cat_rows(text, visual)?;
                let (m, q, k, v) = w.0.qkv(&x, c, heads)?;
                let rot = |t: &Tensor| -> Result<Tensor> {
                    let vis = rotate(&t.narrow(0, n_text, n_vis)?, rope)?;
                    if n_text == 0 {
                        Ok(vis)
                    } else {
                        Ok(Tensor::cat(&[&t.narrow(0, 0, n_text)?, &vis], 0)?)
                    }
                };
                let a = attention(&rot(&q)?, &rot(&k)?, &v)?;
                let y = w.0.post(&x, &a, &m)?;
                Ok((y.narrow(0, 0, n_text)?, y.narrow(0, n_text, n_vis)?))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinalLayer {
    modulation: Linear,
    proj: Linear,
}

impl FinalLayer {
    fn new(ps: &mut ParamStore, dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            modulation: Linear::zeros(ps, "final.modulation", dim, 2 * dim)?,
            // small so the initial velocity is close to zero but still input-dependent
            proj: Linear::with_init(ps, "final.proj", dim, out, Init::Normal(0.1 / (dim as f64).sqrt()), true)?,
        })
    }

    fn forward(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let m = self.modulation.forward(&c.silu()?)?.chunk(2, D::Minus1)?;
        self.proj.forward(&modulate(&layer_norm(x, LN_EPS)?, &m[0], &m[1])?)
    }
}

/// Copies of the first `ceil(blocks / 2)` backbone blocks run on
/// `video + hint(pose)`; after each, a zero-initialized projection yields a
/// residual for the matching backbone block.
#[derive(Debug, Clone)]
pub struct ControlAdapter {
    hint: Linear,
    blocks: Vec<Block>,
    zero_out: Vec<Linear>,
}

pub const CONTROL_PREFIX: &str = "control";

impl ControlAdapter {
    pub fn new(ps: &mut ParamStore, backbone_blocks: &[Block], dim: usize) -> Result<Self> {
        let n = backbone_blocks.len().div_ceil(2);
        let p = CONTROL_PREFIX;
        let blocks = backbone_blocks[..n]
            .iter()
            .enumerate()
            .map(|(k, b)| Block::copy_from(ps, &format!("{p}.blocks.{k}"), b))
            .collect::<Result<Vec<_>>>()?;
        let zero_out =
            (0..n).map(|k| Linear::zeros(ps, &format!("{p}.zero_out.{k}"), dim, dim)).collect::<Result<Vec<_>>>()?;
        Ok(Self { hint: Linear::zeros(ps, &format!("{p}.hint"), dim, dim)?, blocks, zero_out })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Per-block residuals for the video tokens.
    pub fn residuals(
        &self,
        video: &Tensor,
        pose_tokens: &Tensor,
        text: &Tensor,
        c: &Tensor,
        rope: &RotaryTables,
        heads: usize,
    ) -> Result<Vec<Tensor>> {
        let mut x = (video + self.hint.forward(pose_tokens)?)?;
        let mut txt = text.clone();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (b, z) in self.blocks.iter().zip(&self.zero_out) {
            (txt, x) = b.forward(&txt, &x, c, Some(rope), heads)?;
            out.push(z.forward(&x)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub time: TimestepEmbedding,
    pub blocks: Vec<Block>,
    pub final_layer: FinalLayer,
    pub heads: usize,
    pub dim: usize,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, dim: usize, heads: usize, dual: usize, single: usize, hidden: usize, out: usize) -> Result<Self> {
        if dual == 0 || single == 0 {
            return Err(Error::config("need at least one dual and one single block"));
        }
        if dim % heads != 0 {
            return Err(Error::config(format!("dim {dim} not divisible by heads {heads}")));
        }
        let time = TimestepEmbedding::new(ps, "time", dim)?;
        let mut blocks = Vec::with_capacity(dual + single);
        for k in 0..dual {
            blocks.push(Block::new_dual(ps, &format!("dual.{k}"), dim, hidden)?);
        }
        for k in 0..single {
            blocks.push(Block::new_single(ps, &format!("single.{k}"), dim, hidden)?);
        }
        Ok(Self { time, blocks, final_layer: FinalLayer::new(ps, dim, out)?, heads, dim })
    }

    /// Run all blocks and the output head; returns one output row per visual token.
    ///
    /// `residuals` (if any) are added to the last `n_video` visual rows after the
    /// matching leading blocks.
    pub fn forward(
        &self,
        visual: &Tensor,
        text: &Tensor,
        c: &Tensor,
        rope: &RotaryTables,
        residuals: &[Tensor],
    ) -> Result<Tensor> {
        if rope.len() != visual.dims()[0] {
            return Err(Error::shape(format!("{} positions for {} visual tokens", rope.len(), visual.dims()[0])));
        }
        if residuals.len() > self.blocks.len() {
            return Err(Error::shape(format!("{} residuals for {} blocks", residuals.len(), self.blocks.len())));
        }
        let n = visual.dims()[0];
        let mut x = visual.clone();
        let mut txt = text.clone();
        for (k, b) in self.blocks.iter().enumerate() {
            (txt, x) = b.forward(&txt, &x, c, Some(rope), self.heads)?;
            if let Some(r) = residuals.get(k) {
                let nv = r.dims()[0];
                let head = x.narrow(0, 0, n - nv)?;
                let tail = (x.narrow(0, n - nv, nv)? + r)?;
                x = cat_rows(&head, &tail)?;
            }
        }
        self.final_layer.forward(&x, c)
    }

    pub fn timestep(&self, t: f64, dtype: DType) -> Result<Tensor> {
        self.time.forward(t, dtype)
    }
}

/// Overwrite every parameter with seeded normal noise (dense state for gradient checks).
pub fn randomize_all(ps: &ParamStore, std: f64, seed: u64) -> Result<()> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    for (_, v) in ps.all_vars() {
        let n = v.elem_count();
        let vals: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
        let t = Tensor::from_vec(vals, v.shape(), v.device())?.to_dtype(v.dtype())?;
        v.set(&t)?;
    }
    Ok(())
}

