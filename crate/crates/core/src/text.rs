//! Segmented instruction / prompt / image-prompt conditioning.
//!
//! Prompts are laid out as
//!
//! ```text
//! [instruction ids] <SEP> [prompt ids] (<SEP> [<IMG> x 16])?
//! ```
//!
//! and encoded by a small bidirectional transformer whose `<IMG>` slots carry
//! projected color statistics of the reference image.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, layer_norm, Linear, Mlp};
use crate::params::{Init, ParamStore};
use crate::video::Image;

pub const VOCAB_SIZE: usize = 1024;
pub const SEP_ID: u32 = 0;
pub const IMG_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

/// Side of the pooling grid for image-prompt statistics.
pub const IMAGE_GRID: usize = 4;
pub const IMAGE_TOKENS: usize = IMAGE_GRID * IMAGE_GRID;
/// Mean and standard deviation of each color channel.
pub const IMAGE_STAT_DIM: usize = 6;
pub const MAX_TEXT_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTriple {
    pub instruction: String,
    pub text_prompt: String,
    /// Whether an image prompt follows (the image itself travels separately).
    pub image_slot: bool,
}

impl PromptTriple {
    pub fn new(instruction: impl Into<String>, text_prompt: impl Into<String>, image_slot: bool) -> Self {
        Self { instruction: instruction.into(), text_prompt: text_prompt.into(), image_slot }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Instruction,
    Sep,
    Prompt,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl TextTokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_slots(&self) -> usize {
        self.ids.iter().filter(|&&i| i == IMG_ID).count()
    }

    /// Index ranges of the instruction, prompt and (optional) image segments.
    pub fn spans(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>, Option<std::ops::Range<usize>>) {
        let span = |seg: Segment| {
            let first = self.segments.iter().position(|&s| s == seg)?;
            let last = self.segments.iter().rposition(|&s| s == seg)?;
            Some(first..last + 1)
        };
        (
            span(Segment::Instruction).unwrap_or(0..0),
            span(Segment::Prompt).unwrap_or(0..0),
            span(Segment::Image),
        )
    }

    /// Replace the instruction segment with padding of the same length.
    pub fn without_instruction(&self) -> TextTokenSequence {
        let ids = self
            .ids
            .iter()
            .zip(&self.segments)
            .map(|(&id, &s)| if s == Segment::Instruction { PAD_ID } else { id })
            .collect();
        TextTokenSequence { ids, segments: self.segments.clone() }
    }
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Hash a word into the non-reserved part of the vocabulary.
pub fn word_id(word: &str) -> u32 {
    let h = crate::params::name_hash(word);
    FIRST_WORD_ID + (h % (VOCAB_SIZE as u64 - FIRST_WORD_ID as u64)) as u32
}

pub fn build_prompt(triple: &PromptTriple) -> Result<TextTokenSequence> {
    let instr = words(&triple.instruction);
    let prompt = words(&triple.text_prompt);
    if instr.is_empty() {
        return Err(Error::validation("instruction is empty"));
    }
    if prompt.is_empty() {
        return Err(Error::validation("text prompt is empty"));
    }
    let mut ids = Vec::new();
    let mut segments = Vec::new();
    for w in &instr {
        ids.push(word_id(w));
        segments.push(Segment::Instruction);
    }
    ids.push(SEP_ID);
    segments.push(Segment::Sep);
    for w in &prompt {
        ids.push(word_id(w));
        segments.push(Segment::Prompt);
    }
    if triple.image_slot {
        ids.push(SEP_ID);
        segments.push(Segment::Sep);
        for _ in 0..IMAGE_TOKENS {
            ids.push(IMG_ID);
            segments.push(Segment::Image);
        }
    }
    if ids.len() > MAX_TEXT_LEN {
        return Err(Error::validation(format!("prompt of {} tokens exceeds {MAX_TEXT_LEN}", ids.len())));
    }
    Ok(TextTokenSequence { ids, segments })
}

/// Per-cell color mean and standard deviation on a fixed 4x4 grid, `(16, 6)` row-major.
pub fn image_stats(image: &Image) -> Vec<f32> {
    let mut out = Vec::with_capacity(IMAGE_TOKENS * IMAGE_STAT_DIM);
    for gy in 0..IMAGE_GRID {
        for gx in 0..IMAGE_GRID {
            let (y0, y1) = (gy * image.height / IMAGE_GRID, ((gy + 1) * image.height / IMAGE_GRID).max(gy * image.height / IMAGE_GRID + 1));
            let (x0, x1) = (gx * image.width / IMAGE_GRID, ((gx + 1) * image.width / IMAGE_GRID).max(gx * image.width / IMAGE_GRID + 1));
            let mut sum = [0f64; 3];
            let mut sq = [0f64; 3];
            let mut n = 0f64;
            for y in y0..y1.min(image.height) {
                for x in x0..x1.min(image.width) {
                    let p = image.get(y, x);
                    for c in 0..3 {
                        sum[c] += p[c] as f64;
                        sq[c] += (p[c] as f64).powi(2);
                    }
                    n += 1.0;
                }
            }
            let n = n.max(1.0);
            for c in 0..3 {
                out.push((sum[c] / n) as f32);
            }
            for c in 0..3 {
                let m = sum[c] / n;
                out.push((sq[c] / n - m * m).max(0.0).sqrt() as f32);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    qkv: Linear,
    out: Linear,
    mlp: Mlp,
    heads: usize,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(&layer_norm(x, 1e-6)?)?.reshape((n, 3, self.heads, hd))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?;
        let x = (x + self.out.forward(&attention(&q, &k, &v)?)?)?;
        Ok((&x + self.mlp.forward(&layer_norm(&x, 1e-6)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: Tensor,
    pub pos: Tensor,
    pub img_proj: Linear,
    blocks: Vec<EncoderBlock>,
    dim: usize,
}

pub const TEXT_PREFIX: &str = "text";

impl TextEncoder {
    pub fn new(ps: &mut ParamStore, dim: usize, heads: usize, blocks: usize) -> Result<Self> {
        let p = TEXT_PREFIX;
        let embed = ps.init(&format!("{p}.embed"), &[VOCAB_SIZE, dim], Init::Normal(0.5))?;
        let pos = ps.init(&format!("{p}.pos"), &[MAX_TEXT_LEN, dim], Init::Normal(0.1))?;
        let img_proj = Linear::new(ps, &format!("{p}.img_proj"), IMAGE_STAT_DIM, dim)?;
        let blocks = (0..blocks)
            .map(|b| {
                Ok(EncoderBlock {
                    qkv: Linear::new(ps, &format!("{p}.blocks.{b}.qkv"), dim, 3 * dim)?,
                    out: Linear::new(ps, &format!("{p}.blocks.{b}.out"), dim, dim)?,
                    mlp: Mlp::new(ps, &format!("{p}.blocks.{b}.mlp"), dim, 2 * dim)?,
                    heads,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed, pos, img_proj, blocks, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(16, D)` image-prompt features: pooled color statistics through the learned projection.
    pub fn image_prompt_features(&self, image: &Image) -> Result<Tensor> {
        let stats = Tensor::from_vec(image_stats(image), (IMAGE_TOKENS, IMAGE_STAT_DIM), self.embed.device())?
            .to_dtype(self.embed.dtype())?;
        self.img_proj.forward(&stats)
    }

    /// Encode ids into `(len, D)` conditioning tokens. `image_feats` must be
    /// given exactly when the sequence has `<IMG>` slots.
    pub fn encode(&self, seq: &TextTokenSequence, image_feats: Option<&Tensor>) -> Result<Tensor> {
        let slots = seq.image_slots();
        match (slots, image_feats) {
            (0, None) => {}
            (n, Some(f)) if n > 0 && f.dims2()?.0 == n => {}
            (n, f) => {
                return Err(Error::validation(format!(
                    "{n} <IMG> slots but {} image feature rows",
                    f.map(|t| t.dims()[0]).unwrap_or(0)
                )))
            }
        }
        let dev = self.embed.device();
        let mut parts = Vec::new();
        let mut k = 0;
        let mut img_row = 0;
        while k < seq.ids.len() {
            let is_img = seq.ids[k] == IMG_ID;
            let start = k;
            while k < seq.ids.len() && (seq.ids[k] == IMG_ID) == is_img {
                k += 1;
            }
            if is_img {
                parts.push(image_feats.unwrap().narrow(0, img_row, k - start)?);
                img_row += k - start;
            } else {
                let ids = Tensor::from_vec(seq.ids[start..k].to_vec(), k - start, dev)?;
                parts.push(self.embed.index_select(&ids, 0)?);
            }
        }
        let mut x = Tensor::cat(&parts, 0)?;
        x = x.broadcast_add(&self.pos.narrow(0, 0, seq.len())?)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(layer_norm(&x, 1e-6)?.contiguous()?)
    }
}
