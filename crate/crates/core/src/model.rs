//! The full editing model: tokenizers, condition fusion, instruction encoder
//! and backbone wired together for one of the three pose-injection variants.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ControlAdapter, InjectionVariant};
use crate::codec::{LatentCodec, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{assemble, fuse, AssembledInput, ConditionSet, FusionHead, Presence, TokenTag};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::rope::{RopeAllocation, RotaryTables};
use crate::text::{build_prompt, PromptTriple, TextEncoder, TextTokenSequence, TEXT_PREFIX};
use crate::tokenizers::{build_fusion_tokenizer, pose_tokens, tokenize_mask_pair, unpatchify, Patch, PoseNet, VideoTokenizer};
use crate::video::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub dual_blocks: usize,
    pub single_blocks: usize,
    pub mlp_ratio: usize,
    pub text_dim: usize,
    pub text_blocks: usize,
    pub patch: Patch,
    pub injection: InjectionVariant,
    /// Learned projections on the mask and pose streams (`false` sums them directly).
    pub fusion_fc: bool,
    /// Spatial offset of reference positions.
    pub reference_shift: bool,
    /// Keep the instruction segment of the prompt (`false` pads it out).
    pub use_instruction: bool,
    pub text_trainable: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            dual_blocks: 2,
            single_blocks: 2,
            mlp_ratio: 2,
            text_dim: 128,
            text_blocks: 2,
            patch: Patch::default(),
            injection: InjectionVariant::Fusion,
            fusion_fc: true,
            reference_shift: true,
            use_instruction: true,
            text_trainable: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!("dim {} must be heads ({}) x head_dim", self.dim, self.heads)));
        }
        if self.dual_blocks == 0 || self.single_blocks == 0 {
            return Err(Error::config("dual_blocks and single_blocks must both be at least 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if self.text_dim == 0 || self.text_dim % self.heads != 0 {
            return Err(Error::config(format!("text_dim {} not divisible by heads {}", self.text_dim, self.heads)));
        }
        if self.patch.pt != 1 {
            return Err(Error::config("reference images are single frames; patch.pt must be 1"));
        }
        if self.patch.ph == 0 || self.patch.pw == 0 {
            return Err(Error::config("patch extents must be positive"));
        }
        RopeAllocation::for_head_dim(self.head_dim())?;
        Ok(())
    }

    /// Output features per token.
    pub fn out_features(&self) -> usize {
        LATENT_CHANNELS * self.patch.volume()
    }
}

/// Latent-space conditions of one sample. Absent streams are `None` / empty.
#[derive(Debug, Clone, Default)]
pub struct LatentConditions {
    /// `(T, H, W, 16)`
    pub masked_source: Option<Tensor>,
    /// `(T, H, W, 16)`
    pub mask: Option<Tensor>,
    /// `(T, H, W, 16)`
    pub pose: Option<Tensor>,
    /// Each `(1, H, W, 16)`.
    pub references: Vec<Tensor>,
    pub prompt: Option<TextTokenSequence>,
    /// Source of the image-prompt slot features.
    pub prompt_image: Option<Image>,
}

impl LatentConditions {
    /// Encode pixel conditions through the codec. Only streams flagged present are kept.
    pub fn encode(
        codec: &LatentCodec,
        set: &ConditionSet,
        prompt: Option<&PromptTriple>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        set.validate()?;
        let p = set.presence;
        let to_t = |l: crate::codec::LatentVideo| -> Result<Tensor> { l.to_tensor(device)?.to_dtype(dtype).map_err(Error::from) };
        let (masked_source, mask) = match (&set.masked_source, &set.mask_video) {
            (Some(s), Some(m)) if p.mask => (Some(to_t(codec.encode(s)?)?), Some(to_t(codec.encode(m)?)?)),
            _ => (None, None),
        };
        let pose = match &set.pose_video {
            Some(v) if p.pose => Some(to_t(codec.encode(v)?)?),
            _ => None,
        };
        let references = if p.reference {
            set.references.iter().map(|r| to_t(codec.encode_image(r)?)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (prompt, prompt_image) = match prompt {
            Some(tr) if p.text => {
                let image = if tr.image_slot {
                    Some(set.references.first().cloned().ok_or_else(|| {
                        Error::validation("prompt has an image slot but the sample has no reference image")
                    })?)
                } else {
                    None
                };
                (Some(build_prompt(tr)?), image)
            }
            _ => (None, None),
        };
        Ok(Self { masked_source, mask, pose, references, prompt, prompt_image })
    }

    pub fn presence(&self) -> Presence {
        Presence {
            mask: self.masked_source.is_some(),
            pose: self.pose.is_some(),
            reference: !self.references.is_empty(),
            text: self.prompt.is_some(),
        }
    }

    /// Keep only the streams present in `p`.
    pub fn routed(&self, p: Presence) -> LatentConditions {
        LatentConditions {
            masked_source: self.masked_source.clone().filter(|_| p.mask),
            mask: self.mask.clone().filter(|_| p.mask),
            pose: self.pose.clone().filter(|_| p.pose),
            references: if p.reference { self.references.clone() } else { Vec::new() },
            prompt: self.prompt.clone().filter(|_| p.text),
            prompt_image: self.prompt_image.clone().filter(|_| p.text),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Velocity on the video positions, `(T, H, W, 16)`.
    pub velocity: Tensor,
    /// Raw output rows for every visual token (references included).
    pub tokens: Tensor,
    pub input: AssembledInput,
}

#[derive(Debug)]
pub struct EditModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub k1: VideoTokenizer,
    pub k2: VideoTokenizer,
    pub k3: VideoTokenizer,
    pub posenet: Option<PoseNet>,
    pub fusion: FusionHead,
    pub text: TextEncoder,
    pub text_proj: Option<Linear>,
    pub backbone: Backbone,
    pub control: Option<ControlAdapter>,
    alloc: RopeAllocation,
}

impl EditModel {
    pub fn new(config: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.seed, dtype, device.clone());
        let d = config.dim;
        let k1 = VideoTokenizer::new(&mut ps, "tokenizer.k1", LATENT_CHANNELS, config.patch, d)?;
        let k2 = build_fusion_tokenizer(&k1)?.register(&mut ps, "tokenizer.k2")?;
        let k3 = VideoTokenizer::copy_of(&mut ps, "tokenizer.k3", &k1)?;
        let fusion_variant = config.injection == InjectionVariant::Fusion;
        let posenet = if fusion_variant { Some(PoseNet::new(&mut ps, "posenet", LATENT_CHANNELS)?) } else { None };
        let fusion = if config.fusion_fc {
            FusionHead {
                fc_mask: Some(Linear::zeros(&mut ps, "fusion.fc_mask", d, d)?),
                fc_pose: if fusion_variant { Some(Linear::zeros(&mut ps, "fusion.fc_pose", d, d)?) } else { None },
            }
        } else {
            FusionHead { fc_mask: None, fc_pose: None }
        };
        let text = TextEncoder::new(&mut ps, config.text_dim, config.heads, config.text_blocks)?;
        let text_proj =
            if config.text_dim != d { Some(Linear::new(&mut ps, "text_proj", config.text_dim, d)?) } else { None };
        let backbone = Backbone::new(
            &mut ps,
            d,
            config.heads,
            config.dual_blocks,
            config.single_blocks,
            config.mlp_ratio * d,
            config.out_features(),
        )?;
        let control = if config.injection == InjectionVariant::Controlnet {
            Some(ControlAdapter::new(&mut ps, &backbone.blocks, d)?)
        } else {
            None
        };
        if !config.text_trainable {
            ps.set_trainable_prefix(&format!("{TEXT_PREFIX}."), false);
        }
        let alloc = RopeAllocation::for_head_dim(config.head_dim())?;
        Ok(Self { config, params: ps, k1, k2, k3, posenet, fusion, text, text_proj, backbone, control, alloc })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// `(n, D)` text conditioning tokens; zero rows when the text stream is absent.
    pub fn text_tokens(&self, cond: &LatentConditions) -> Result<Tensor> {
        let Some(seq) = &cond.prompt else {
            return Ok(Tensor::zeros((0, self.config.dim), self.dtype(), self.device())?);
        };
        let seq = if self.config.use_instruction { seq.clone() } else { seq.without_instruction() };
        let feats = match (&cond.prompt_image, seq.image_slots()) {
            (_, 0) => None,
            (Some(img), _) => Some(self.text.image_prompt_features(img)?),
            (None, _) => return Err(Error::validation("prompt image slot without an image")),
        };
        let x = self.text.encode(&seq, feats.as_ref())?;
        match &self.text_proj {
            Some(p) => p.forward(&x),
            None => Ok(x),
        }
    }

    /// Predict the velocity at `z_t` (shape `(T, H, W, 16)`) for time `t`.
    pub fn forward(&self, z_t: &Tensor, t: f64, cond: &LatentConditions) -> Result<ModelOutput> {
        let (lt, lh, lw, _) = z_t.dims4()?;
        let grid = self.config.patch.grid(lt, lh, lw)?;
        let check = |name: &str, x: &Tensor| -> Result<()> {
            if x.dims() != z_t.dims() {
                return Err(Error::shape(format!("{name} latent {:?} does not match noisy latent {:?}", x.dims(), z_t.dims())));
            }
            Ok(())
        };
        let t_noise = self.k1.tokenize(z_t)?;
        let mask_tokens = match (&cond.masked_source, &cond.mask) {
            (Some(s), Some(m)) => {
                check("masked source", s)?;
                check("mask", m)?;
                Some(tokenize_mask_pair(s, m, &self.k2)?)
            }
            (None, None) => None,
            _ => return Err(Error::validation("masked source and mask must be given together")),
        };
        let mut control_pose = None;
        let fused = match &cond.pose {
            None => fuse(&t_noise, mask_tokens.as_ref(), None, &self.fusion)?,
            Some(p) => {
                check("pose", p)?;
                match self.config.injection {
                    InjectionVariant::Fusion => {
                        let posenet = self.posenet.as_ref().ok_or_else(|| Error::config("fusion variant without posenet"))?;
                        let tp = pose_tokens(p, posenet, &self.k3)?;
                        fuse(&t_noise, mask_tokens.as_ref(), Some(&tp), &self.fusion)?
                    }
                    InjectionVariant::TokenAdd => {
                        let base = fuse(&t_noise, mask_tokens.as_ref(), None, &self.fusion)?;
                        inject_token_add(&base, &self.k3.tokenize(p)?)?
                    }
                    InjectionVariant::Controlnet => {
                        control_pose = Some(self.k3.tokenize(p)?);
                        fuse(&t_noise, mask_tokens.as_ref(), None, &self.fusion)?
                    }
                }
            }
        };
        let mut ref_tokens = Vec::with_capacity(cond.references.len());
        for r in &cond.references {
            let (rt, rh, rw, rc) = r.dims4()?;
            if rt != 1 || rh != lh || rw != lw || rc != LATENT_CHANNELS {
                return Err(Error::shape(format!("reference latent {:?} must be (1, {lh}, {lw}, {LATENT_CHANNELS})", r.dims())));
            }
            ref_tokens.push(self.k1.tokenize(r)?);
        }
        let input = assemble(&ref_tokens, &fused, grid, self.config.reference_shift)?;
        let text = self.text_tokens(cond)?;
        let c = self.backbone.timestep(t, self.dtype())?;
        let rope = RotaryTables::new(&input.positions, &self.alloc, self.dtype(), self.device())?;
        let residuals = match (&self.control, control_pose) {
            (Some(adapter), Some(tp)) => {
                let n_video = input.tags.iter().filter(|&&g| g == TokenTag::Video).count();
                let video_rope = RotaryTables {
                    cos: rope.cos.narrow(0, input.len() - n_video, n_video)?,
                    sin: rope.sin.narrow(0, input.len() - n_video, n_video)?,
                };
                adapter.residuals(&fused, &tp, &text, &c, &video_rope, self.config.heads)?
            }
            _ => Vec::new(),
        };
        let tokens = self.backbone.forward(&input.tokens, &text, &c, &rope, &residuals)?;
        let n_ref = input.num_reference();
        let video_rows = tokens.narrow(0, n_ref, input.len() - n_ref)?;
        let velocity = unpatchify(&video_rows, grid, self.config.patch, LATENT_CHANNELS)?;
        Ok(ModelOutput { velocity, tokens, input })
    }

    /// Parameters of the denoiser proper (blocks, timestep embedding, output head).
    pub fn backbone_param_count(&self) -> usize {
        ["dual.", "single.", "time.", "final."].iter().map(|p| self.params.param_count_prefix(p)).sum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(&self, path: &std::path::Path) -> Result<()> {
        self.params.load(path)
    }
}

/// Element-wise sum of pose tokens onto video tokens, with no projection.
pub fn inject_token_add(video_tokens: &Tensor, pose_tokens: &Tensor) -> Result<Tensor> {
    if video_tokens.dims() != pose_tokens.dims() {
        return Err(Error::shape(format!(
            "pose tokens {:?} do not match video tokens {:?}",
            pose_tokens.dims(),
            video_tokens.dims()
        )));
    }
    Ok((video_tokens + pose_tokens)?)
}
