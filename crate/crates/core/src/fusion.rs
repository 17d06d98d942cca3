//! Condition routing, per-stream projections and assembly of the full
//! backbone input sequence.
//!
//! The input sequence is `[ref_1 ; ref_2 ; fused]` where
//! `fused = t_noise + fc_mask(T_M) + fc_pose(t_p)` and absent streams
//! contribute nothing at all.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::rope::{reference_indices, video_indices, RopeIndex};
use crate::video::{Image, VideoClip};

pub const MAX_REFERENCES: usize = 2;

/// Which condition streams take part in one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Presence {
    /// Masked source and mask video, always together.
    pub mask: bool,
    pub pose: bool,
    pub reference: bool,
    pub text: bool,
}

impl Presence {
    pub const NONE: Presence = Presence { mask: false, pose: false, reference: false, text: false };

    pub fn any(&self) -> bool {
        self.mask || self.pose || self.reference || self.text
    }

    /// Streams present in both.
    pub fn and(&self, other: &Presence) -> Presence {
        Presence {
            mask: self.mask && other.mask,
            pose: self.pose && other.pose,
            reference: self.reference && other.reference,
            text: self.text && other.text,
        }
    }
}

/// Pixel-space conditions of one sample.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub references: Vec<Image>,
    pub masked_source: Option<VideoClip>,
    pub mask_video: Option<VideoClip>,
    pub pose_video: Option<VideoClip>,
    pub presence: Presence,
}

impl ConditionSet {
    pub fn new(
        references: Vec<Image>,
        masked_source: Option<VideoClip>,
        mask_video: Option<VideoClip>,
        pose_video: Option<VideoClip>,
        text: bool,
    ) -> Result<Self> {
        let presence = Presence {
            mask: masked_source.is_some() && mask_video.is_some(),
            pose: pose_video.is_some(),
            reference: !references.is_empty(),
            text,
        };
        let set = Self { references, masked_source, mask_video, pose_video, presence };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.masked_source.is_some() != self.mask_video.is_some() {
            return Err(Error::validation("masked source and mask video must be given together"));
        }
        if self.references.len() > MAX_REFERENCES {
            return Err(Error::Unsupported(format!(
                "{} reference images (at most {MAX_REFERENCES})",
                self.references.len()
            )));
        }
        if self.presence.mask && self.masked_source.is_none() {
            return Err(Error::validation("mask stream flagged present without data"));
        }
        if self.presence.pose && self.pose_video.is_none() {
            return Err(Error::validation("pose stream flagged present without data"));
        }
        if self.presence.reference && self.references.is_empty() {
            return Err(Error::validation("reference stream flagged present without images"));
        }
        Ok(())
    }

    pub fn with_presence(&self, presence: Presence) -> ConditionSet {
        ConditionSet { presence, ..self.clone() }
    }
}

/// Independent per-stream drop probabilities for training-time routing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutPolicy {
    pub p_mask: f64,
    pub p_pose: f64,
    pub p_reference: f64,
    pub p_text: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self { p_mask: 0.1, p_pose: 0.3, p_reference: 0.3, p_text: 0.1 }
    }
}

impl DropoutPolicy {
    pub const OFF: DropoutPolicy = DropoutPolicy { p_mask: 0.0, p_pose: 0.0, p_reference: 0.0, p_text: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_mask", self.p_mask), ("p_pose", self.p_pose), ("p_reference", self.p_reference), ("p_text", self.p_text)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if [self.p_mask, self.p_pose, self.p_reference, self.p_text].iter().all(|&p| p >= 1.0) {
            return Err(Error::config("dropout policy drops every stream with certainty"));
        }
        Ok(())
    }
}

/// Randomly mark streams absent. Streams that are already absent stay absent;
/// an outcome with nothing present is redrawn.
pub fn route<R: Rng + ?Sized>(present: Presence, rng: &mut R, policy: &DropoutPolicy) -> Result<Presence> {
    policy.validate()?;
    if !present.any() {
        return Ok(present);
    }
    let certain = |on: bool, p: f64| !on || p >= 1.0;
    if certain(present.mask, policy.p_mask)
        && certain(present.pose, policy.p_pose)
        && certain(present.reference, policy.p_reference)
        && certain(present.text, policy.p_text)
    {
        return Err(Error::config("dropout policy removes every available stream of this sample"));
    }
    loop {
        let keep = |on: bool, p: f64, rng: &mut R| on && !(p > 0.0 && rng.random::<f64>() < p);
        let out = Presence {
            mask: keep(present.mask, policy.p_mask, rng),
            pose: keep(present.pose, policy.p_pose, rng),
            reference: keep(present.reference, policy.p_reference, rng),
            text: keep(present.text, policy.p_text, rng),
        };
        if out.any() {
            return Ok(out);
        }
    }
}

/// Projections applied to condition tokens before they are summed onto the
/// noisy-video tokens. `None` is the identity (direct summation arm).
#[derive(Debug, Clone)]
pub struct FusionHead {
    pub fc_mask: Option<Linear>,
    pub fc_pose: Option<Linear>,
}

impl FusionHead {
    pub fn new(ps: &mut ParamStore, dim: usize, with_fc: bool) -> Result<Self> {
        if !with_fc {
            return Ok(Self { fc_mask: None, fc_pose: None });
        }
        Ok(Self {
            fc_mask: Some(Linear::zeros(ps, "fusion.fc_mask", dim, dim)?),
            fc_pose: Some(Linear::zeros(ps, "fusion.fc_pose", dim, dim)?),
        })
    }
}

/// `t_noise + fc_mask(mask_tokens) + fc_pose(pose_tokens)`; absent streams add nothing.
pub fn fuse(t_noise: &Tensor, mask_tokens: Option<&Tensor>, pose_tokens: Option<&Tensor>, head: &FusionHead) -> Result<Tensor> {
    let mut out = t_noise.clone();
    for (name, tokens, fc) in [("mask", mask_tokens, &head.fc_mask), ("pose", pose_tokens, &head.fc_pose)] {
        let Some(tokens) = tokens else { continue };
        if tokens.dims() != t_noise.dims() {
            return Err(Error::shape(format!(
                "{name} stream tokens {:?} do not match noisy tokens {:?}",
                tokens.dims(),
                t_noise.dims()
            )));
        }
        let projected = match fc {
            Some(fc) => fc.forward(tokens)?,
            None => tokens.clone(),
        };
        out = (out + projected)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenTag {
    Reference,
    Video,
}

/// The backbone's visual input: tokens, rotary positions, tags and loss mask.
#[derive(Debug, Clone)]
pub struct AssembledInput {
    pub tokens: Tensor,
    pub positions: Vec<RopeIndex>,
    pub tags: Vec<TokenTag>,
    pub loss_mask: Vec<bool>,
    /// Token grid `(t, h, w)` of the video part.
    pub video_grid: (usize, usize, usize),
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn num_reference(&self) -> usize {
        self.tags.iter().filter(|&&t| t == TokenTag::Reference).count()
    }
}

/// Concatenate reference tokens (each an `h x w` grid at frame -1) and fused
/// video tokens, with matching positions.
pub fn assemble(
    ref_tokens: &[Tensor],
    fused: &Tensor,
    video_grid: (usize, usize, usize),
    reference_shift: bool,
) -> Result<AssembledInput> {
    if ref_tokens.len() > MAX_REFERENCES {
        return Err(Error::Unsupported(format!("{} references (at most {MAX_REFERENCES})", ref_tokens.len())));
    }
    let (gt, gh, gw) = video_grid;
    let n_video = fused.dims2()?.0;
    if n_video != gt * gh * gw {
        return Err(Error::shape(format!("{n_video} fused tokens for grid {video_grid:?}")));
    }
    let mut positions = Vec::with_capacity(n_video + ref_tokens.len() * gh * gw);
    let mut tags = Vec::with_capacity(positions.capacity());
    for r in ref_tokens {
        if r.dims2()?.0 != gh * gw {
            return Err(Error::shape(format!("reference has {} tokens, expected {gh}x{gw}", r.dims2()?.0)));
        }
        positions.extend(reference_indices(gh, gw, reference_shift)?);
        tags.extend(std::iter::repeat_n(TokenTag::Reference, gh * gw));
    }
    positions.extend(video_indices(gt, gh, gw)?);
    tags.extend(std::iter::repeat_n(TokenTag::Video, n_video));
    let mut parts: Vec<&Tensor> = ref_tokens.iter().collect();
    parts.push(fused);
    let tokens = if parts.len() == 1 { fused.clone() } else { Tensor::cat(&parts, 0)? };
    let loss_mask = tags.iter().map(|&t| t == TokenTag::Video).collect();
    Ok(AssembledInput { tokens, positions, tags, loss_mask, video_grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all() -> Presence {
        Presence { mask: true, pose: true, reference: true, text: true }
    }

    #[test]
    fn zero_policy_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(route(all(), &mut rng, &DropoutPolicy::OFF).unwrap(), all());
        }
    }

    #[test]
    fn policy_validation() {
        let p = DropoutPolicy { p_mask: 1.0, p_pose: 1.0, p_reference: 1.0, p_text: 1.0 };
        assert!(p.validate().is_err());
        assert!(DropoutPolicy { p_pose: 1.5, ..Default::default() }.validate().is_err());
        assert!(DropoutPolicy { p_mask: -0.1, ..Default::default() }.validate().is_err());
        // certain removal of this sample's only stream
        let only_pose = Presence { pose: true, ..Presence::NONE };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(route(only_pose, &mut rng, &DropoutPolicy { p_pose: 1.0, ..DropoutPolicy::OFF }).is_err());
    }

    #[test]
    fn route_never_adds_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let some = Presence { mask: true, pose: false, reference: false, text: true };
        for _ in 0..500 {
            let r = route(some, &mut rng, &DropoutPolicy::default()).unwrap();
            assert!(!r.pose && !r.reference && r.any());
        }
    }

    fn toks(n: usize, d: usize, v: f32) -> Tensor {
        Tensor::full(v, (n, d), &Device::Cpu).unwrap()
    }

    #[test]
    fn fuse_absent_and_zero_fc_are_exact() {
        let mut ps = ParamStore::new(0, DType::F32, Device::Cpu);
        let head = FusionHead::new(&mut ps, 8, true).unwrap();
        let t = Tensor::randn(0f32, 1.0, (6, 8), &Device::Cpu).unwrap();
        let base = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let a = fuse(&t, None, None, &head).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, base);
        let b = fuse(&t, Some(&toks(6, 8, 3.0)), Some(&toks(6, 8, -2.0)), &head).unwrap();
        assert_eq!(b.flatten_all().unwrap().to_vec1::<f32>().unwrap(), base);
        let err = fuse(&t, None, Some(&toks(5, 8, 1.0)), &head).unwrap_err();
        assert!(err.to_string().contains("pose"));
        let ident = FusionHead::new(&mut ps, 8, false).unwrap();
        let c = fuse(&toks(2, 2, 1.0), Some(&toks(2, 2, 2.0)), None, &ident).unwrap();
        assert_eq!(c.to_vec2::<f32>().unwrap(), vec![vec![3.0; 2]; 2]);
    }

    #[test]
    fn assemble_layout() {
        let fused = toks(64, 4, 1.0);
        let refs = [toks(16, 4, 0.0), toks(16, 4, 0.0)];
        let h = assemble(&refs, &fused, (4, 4, 4), true).unwrap();
        assert_eq!(h.len(), 96);
        assert_eq!(h.tokens.dims(), &[96, 4]);
        assert!(h.positions[..32].iter().all(|p| p.t == -1));
        assert!(h.loss_mask[..32].iter().all(|&m| !m) && h.loss_mask[32..].iter().all(|&m| m));
        let h0 = assemble(&[], &fused, (4, 4, 4), true).unwrap();
        assert_eq!(h0.len(), 64);
        assert!(h0.positions.iter().all(|p| p.t >= 0));
        let three = [toks(16, 4, 0.0), toks(16, 4, 0.0), toks(16, 4, 0.0)];
        assert!(matches!(assemble(&three, &fused, (4, 4, 4), true), Err(Error::Unsupported(_))));
    }

    #[test]
    fn condition_set_validation() {
        let clip = VideoClip::filled(4, 8, 8, [0.5; 3]);
        assert!(ConditionSet::new(vec![], Some(clip.clone()), None, None, true).is_err());
        let imgs = vec![Image::filled(8, 8, [0.0; 3]); 3];
        assert!(ConditionSet::new(imgs, None, None, None, true).is_err());
        let c = ConditionSet::new(vec![], Some(clip.clone()), Some(clip), None, true).unwrap();
        assert!(c.presence.mask && !c.presence.pose);
    }
}
