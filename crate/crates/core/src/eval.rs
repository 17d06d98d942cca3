//! Generate clips for task samples and score them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, LatentVideo};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, SamplerConfig};
use crate::metrics::{
    copy_paste_score, detect_foreground, dynamic_degree, dynamic_degree_in, motion_map, object_similarity, pixel_l2, pose_error,
    region_psnr, temporal_consistency, PatchColorEmbedder, Region,
};
use crate::model::{EditModel, LatentConditions};
use crate::synth::scene::{color_distance, color_rgb, dilate_mask_by};
use crate::synth::{JointDecoder, TaskKind, TaskSample};
use crate::video::{MaskVideo, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub embedder: PatchColorEmbedder,
    pub decoder: JointDecoder,
    /// Color distance from the background above which a pixel is foreground.
    pub foreground_tol: f32,
    /// Pixels charged per undecodable joint in [`SampleMetrics::pose_error_penalized`].
    pub missing_joint_penalty: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            embedder: PatchColorEmbedder::default(),
            decoder: JointDecoder::default(),
            foreground_tol: 0.15,
            missing_joint_penalty: 32.0,
        }
    }
}

/// Sample a latent under every condition of `sample` and decode it.
pub fn generate(model: &EditModel, codec: &LatentCodec, sample: &TaskSample, sampler: &SamplerConfig) -> Result<VideoClip> {
    let cond = LatentConditions::encode(codec, &sample.conditions()?, Some(&sample.prompt), model.dtype(), model.device())?;
    generate_with(model, codec, &cond, &sample.target, sampler)
}

/// Sample under explicit latent conditions; `like` fixes the clip geometry.
pub fn generate_with(
    model: &EditModel,
    codec: &LatentCodec,
    cond: &LatentConditions,
    like: &VideoClip,
    sampler: &SamplerConfig,
) -> Result<VideoClip> {
    let (t, h, w) = codec.config().latent_dims(like.frames, like.height, like.width)?;
    let z = euler_sample(model, cond, &[t, h, w, crate::codec::LATENT_CHANNELS], sampler)?;
    decode_latent(codec, &z)
}

pub fn decode_latent(codec: &LatentCodec, z: &Tensor) -> Result<VideoClip> {
    codec.decode(&LatentVideo::from_tensor(&z.to_dtype(candle_core::DType::F32)?)?)
}

/// Output sensitivity to the pose stream against sensitivity to sampler noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSwap {
    /// Distance between outputs under the sample's pose and a swapped pose, same seed.
    pub swap: f64,
    /// Distance between outputs under the sample's pose with two seeds.
    pub reseed: f64,
}

impl PoseSwap {
    pub fn ratio(&self) -> f64 {
        self.swap / self.reseed.max(1e-12)
    }
}

/// Generate `sample` with its own pose at `sampler.seed` and `alt_seed`, and
/// with the pose video of `other` at `sampler.seed`.
pub fn pose_swap(
    model: &EditModel,
    codec: &LatentCodec,
    sample: &TaskSample,
    other: &TaskSample,
    sampler: &SamplerConfig,
    alt_seed: u64,
) -> Result<PoseSwap> {
    let (Some(_), Some(p2)) = (&sample.pose, &other.pose) else {
        return Err(Error::validation("pose swap needs two pose-driven samples"));
    };
    let set = sample.conditions()?;
    let mut swapped = set.clone();
    swapped.pose_video = Some(p2.clone());
    let enc = |s: &crate::fusion::ConditionSet| LatentConditions::encode(codec, s, Some(&sample.prompt), model.dtype(), model.device());
    let (own, alt) = (enc(&set)?, enc(&swapped)?);
    let base = generate_with(model, codec, &own, &sample.target, sampler)?;
    let reseeded = generate_with(model, codec, &own, &sample.target, &SamplerConfig { seed: alt_seed, ..*sampler })?;
    let swap = generate_with(model, codec, &alt, &sample.target, sampler)?;
    Ok(PoseSwap { swap: pixel_l2(&base, &swap)?, reseed: pixel_l2(&base, &reseeded)? })
}

/// Every metric of one sample; metrics that do not apply to the task are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub task: TaskKind,
    pub temporal_consistency: f64,
    pub dynamic_degree: f64,
    /// Outside the mask, against the source.
    pub region_psnr: Option<f64>,
    pub dynamic_degree_inside: Option<f64>,
    pub object_similarity: Option<f64>,
    pub object_detected_frames: Option<usize>,
    pub pose_error: Option<f64>,
    pub pose_missing: Option<usize>,
    pub pose_error_penalized: Option<f64>,
    pub copy_paste: Option<f64>,
}

/// Footprint of the edited content: pixels where target and source differ,
/// grown by two pixels.
fn edit_footprint(sample: &TaskSample) -> MaskVideo {
    let (s, t) = (&sample.source, &sample.target);
    let mut m = MaskVideo::empty(t.frames, t.height, t.width);
    for f in 0..t.frames {
        for y in 0..t.height {
            for x in 0..t.width {
                if color_distance(s.get(f, y, x), t.get(f, y, x)) > 0.05 {
                    m.set(f, y, x, true);
                }
            }
        }
    }
    dilate_mask_by(&m, 2, 2, 2, 2)
}

fn figure_color(sample: &TaskSample) -> Option<usize> {
    sample.meta.get("figure")?.get("color")?.as_u64().map(|c| c as usize)
}

pub fn evaluate_clip(generated: &VideoClip, sample: &TaskSample, cfg: &EvalConfig) -> Result<SampleMetrics> {
    if !generated.same_shape(&sample.target) {
        return Err(Error::shape("generated clip does not match the sample's target"));
    }
    let emb = &cfg.embedder;
    let mut m = SampleMetrics {
        id: sample.id.clone(),
        task: sample.task,
        temporal_consistency: temporal_consistency(generated, emb)?,
        dynamic_degree: dynamic_degree(generated)?,
        region_psnr: None,
        dynamic_degree_inside: None,
        object_similarity: None,
        object_detected_frames: None,
        pose_error: None,
        pose_missing: None,
        pose_error_penalized: None,
        copy_paste: None,
    };
    if let Some(mask) = sample.mask.as_ref().filter(|k| k.count() > 0) {
        if mask.count() < mask.data.len() {
            m.region_psnr = Some(region_psnr(generated, &sample.source, mask, Region::Outside)?);
        }
        m.dynamic_degree_inside = Some(dynamic_degree_in(generated, Some(mask))?);
    }
    if let Some(reference) = sample.references.first() {
        let mut region = edit_footprint(sample);
        if let Some(mask) = sample.mask.as_ref().filter(|k| k.count() > 0) {
            region = MaskVideo { data: region.data.iter().zip(&mask.data).map(|(a, b)| *a && *b).collect(), ..region };
        }
        let detected = detect_foreground(generated, Some(&region), cfg.foreground_tol);
        let o = object_similarity(reference, generated, &detected, emb)?;
        m.object_similarity = o.score;
        m.object_detected_frames = Some(o.detected_frames);
        let motion = motion_map(&sample.target, &sample.source, 0.05);
        if motion.iter().any(|&b| !b) {
            m.copy_paste = Some(copy_paste_score(reference, &generated.frame(0), &motion)?);
        }
    }
    if let (Some(pose), Some(color)) = (&sample.pose, figure_color(sample)) {
        let e = pose_error(generated, pose, color_rgb(color), &cfg.decoder)?;
        m.pose_error = e.mean_px;
        m.pose_missing = Some(e.missing);
        m.pose_error_penalized = Some(e.penalized(cfg.missing_joint_penalty));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub label: String,
    pub checkpoint: Option<String>,
    pub config_hash: String,
    pub sampler_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub samples: Vec<SampleMetrics>,
}

pub const METRIC_NAMES: [&str; 10] = [
    "temporal_consistency",
    "dynamic_degree",
    "region_psnr",
    "dynamic_degree_inside",
    "object_similarity",
    "pose_error",
    "pose_missing",
    "pose_error_penalized",
    "copy_paste",
    "object_detected_frames",
];

impl EvalReport {
    pub fn new(meta: ReportMeta, samples: Vec<SampleMetrics>) -> Self {
        Self { meta, samples }
    }

    /// Mean of each metric over the samples where it is defined.
    pub fn aggregate(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for name in METRIC_NAMES {
            let vals: Vec<f64> = self
                .samples
                .iter()
                .filter_map(|s| serde_json::to_value(s).ok()?.get(name)?.as_f64())
                .collect();
            if !vals.is_empty() {
                out.insert(name.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.aggregate().get(name).copied()
    }

    /// One JSON line per sample, then one aggregate line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for s in &self.samples {
            let mut v = serde_json::to_value(s)?;
            v["label"] = self.meta.label.clone().into();
            writeln!(f, "{}", serde_json::to_string(&v)?)?;
        }
        let agg = serde_json::json!({ "aggregate": self.aggregate(), "meta": self.meta });
        writeln!(f, "{}", serde_json::to_string(&agg)?)?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let cols = ["temporal_consistency", "dynamic_degree", "region_psnr", "object_similarity", "pose_error", "copy_paste"];
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = write!(s, "{:<22} {:<10}", "sample", "task");
        for c in cols {
            let _ = write!(s, " {:>12}", &c[..c.len().min(12)]);
        }
        s.push('\n');
        for r in &self.samples {
            let v = serde_json::to_value(r).unwrap_or_default();
            let _ = write!(s, "{:<22} {:<10}", r.id, r.task.name());
            for c in cols {
                let _ = write!(s, " {:>12}", fmt(v.get(c).and_then(|x| x.as_f64())));
            }
            s.push('\n');
        }
        let agg = self.aggregate();
        let _ = write!(s, "{:<22} {:<10}", "mean", "");
        for c in cols {
            let _ = write!(s, " {:>12}", fmt(agg.get(c).copied()));
        }
        s.push('\n');
        s
    }
}

/// Generate and score every sample.
pub fn evaluate(
    model: &EditModel,
    codec: &LatentCodec,
    samples: &[TaskSample],
    cfg: &EvalConfig,
    meta: ReportMeta,
    mut on_clip: impl FnMut(&TaskSample, &VideoClip) -> Result<()>,
) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let clip = generate(model, codec, s, &cfg.sampler)?;
        on_clip(s, &clip)?;
        out.push(evaluate_clip(&clip, s, cfg)?);
    }
    Ok(EvalReport::new(meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::synth::{overfit_set, CorpusConfig};

    #[test]
    fn oracle_clips_score_as_expected() {
        let set = overfit_set(&CorpusConfig::default()).unwrap();
        let cfg = EvalConfig::default();
        for s in &set {
            let m = evaluate_clip(&s.target, s, &cfg).unwrap();
            assert!(m.temporal_consistency.is_finite() && m.dynamic_degree > 0.0);
            match s.task {
                TaskKind::Inpaint | TaskKind::MaskEdit => {
                    assert_eq!(m.region_psnr, Some(crate::metrics::PSNR_CAP), "{}", s.id);
                    let inside = m.dynamic_degree_inside.unwrap();
                    assert!(s.task == TaskKind::Inpaint || inside > 0.0);
                }
                TaskKind::PoseDrive => {
                    assert!(m.pose_error.unwrap() <= 1.0, "{}: {:?}", s.id, m.pose_error);
                    assert_eq!(m.pose_missing, Some(0));
                    assert!(m.object_similarity.unwrap() > 0.5, "{:?}", m.object_similarity);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let set = overfit_set(&CorpusConfig::default()).unwrap();
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let cfg = EvalConfig::default();
        let samples: Vec<_> = set
            .iter()
            .map(|s| {
                let recon = codec.decode(&codec.encode(&s.target).unwrap()).unwrap();
                evaluate_clip(&recon, s, &cfg).unwrap()
            })
            .collect();
        let meta = ReportMeta { label: "recon".into(), checkpoint: None, config_hash: "0".into(), sampler_seed: 0 };
        let r = EvalReport::new(meta, samples);
        let agg = r.aggregate();
        assert!(agg["region_psnr"] > 25.0, "{agg:?}");
        assert!(agg["pose_error"] < 6.0, "{agg:?}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.jsonl");
        r.write_jsonl(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), set.len() + 1);
        assert!(r.table().lines().count() == set.len() + 2);
    }
}
