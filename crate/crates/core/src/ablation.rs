//! Matched-arm experiments that differ in exactly one model field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, ReportMeta};
use crate::model::ModelConfig;
use crate::synth::TaskSample;
use crate::train::{checkpoint_dir, latest_checkpoint, load_model, TrainConfig, TrainItem, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    PosenetVariants,
    TokenFusionFc,
    InstructionSegments,
    RopeShift,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::PosenetVariants, Suite::TokenFusionFc, Suite::InstructionSegments, Suite::RopeShift];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::PosenetVariants => "posenet_variants",
            Suite::TokenFusionFc => "token_fusion_fc",
            Suite::InstructionSegments => "instruction_segments",
            Suite::RopeShift => "rope_shift",
        }
    }

    /// The model field the arms vary.
    pub fn field(&self) -> &'static str {
        match self {
            Suite::PosenetVariants => "injection",
            Suite::TokenFusionFc => "fusion_fc",
            Suite::InstructionSegments => "use_instruction",
            Suite::RopeShift => "reference_shift",
        }
    }

    /// Arm names; the first is the reference arm for deltas.
    pub fn arms(&self) -> &'static [&'static str] {
        match self {
            Suite::PosenetVariants => &["fusion", "token_add", "controlnet"],
            Suite::TokenFusionFc => &["with_fc", "without_fc"],
            Suite::InstructionSegments => &["with_instruction", "without_instruction"],
            Suite::RopeShift => &["with_shift", "without_shift"],
        }
    }

    pub fn arm_config(&self, base: &ModelConfig, arm: &str) -> Result<ModelConfig> {
        let mut c = base.clone();
        match (self, arm) {
            (Suite::PosenetVariants, a) => c.injection = a.parse()?,
            (Suite::TokenFusionFc, "with_fc") => c.fusion_fc = true,
            (Suite::TokenFusionFc, "without_fc") => c.fusion_fc = false,
            (Suite::InstructionSegments, "with_instruction") => c.use_instruction = true,
            (Suite::InstructionSegments, "without_instruction") => c.use_instruction = false,
            (Suite::RopeShift, "with_shift") => c.reference_shift = true,
            (Suite::RopeShift, "without_shift") => c.reference_shift = false,
            _ => return Err(Error::config(format!("suite {} has no arm `{arm}`", self.name()))),
        }
        Ok(c)
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation suite `{s}`")))
    }
}

/// Everything an arm is trained and evaluated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// SHA-256 of the arm spec with the name and the ablated field removed.
pub fn matched_hash(arm: &ArmSpec, suite: Suite) -> Result<String> {
    let mut v = serde_json::to_value(arm)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("name");
    }
    if let Some(m) = v.get_mut("model").and_then(|m| m.as_object_mut()) {
        m.remove(suite.field());
    }
    let digest = Sha256::digest(serde_json::to_vec(&v)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Error unless every arm agrees on all fields but the ablated one, and arms
/// are pairwise distinct in that field.
pub fn check_arms(suite: Suite, arms: &[ArmSpec]) -> Result<()> {
    let Some(first) = arms.first() else { return Err(Error::config("ablation without arms")) };
    let h0 = matched_hash(first, suite)?;
    for a in &arms[1..] {
        if matched_hash(a, suite)? != h0 {
            return Err(Error::validation(format!(
                "config drift: arm `{}` differs from arm `{}` outside `{}`",
                a.name,
                first.name,
                suite.field()
            )));
        }
    }
    for (i, a) in arms.iter().enumerate() {
        for b in &arms[i + 1..] {
            if a.model == b.model {
                return Err(Error::validation(format!("arms `{}` and `{}` are identical", a.name, b.name)));
            }
        }
    }
    Ok(())
}

pub fn suite_arms(suite: Suite, model: &ModelConfig, train: &TrainConfig, eval: &EvalConfig) -> Result<Vec<ArmSpec>> {
    suite
        .arms()
        .iter()
        .map(|&a| Ok(ArmSpec { name: a.to_string(), model: suite.arm_config(model, a)?, train: train.clone(), eval: eval.clone() }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmMode {
    /// Train arms without a final checkpoint (resuming when possible).
    TrainMissing,
    /// Only evaluate; a missing final checkpoint is an error.
    EvalOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub suite: Suite,
    pub reports: Vec<EvalReport>,
    /// Arm aggregate minus reference-arm aggregate, per metric.
    pub deltas: BTreeMap<String, BTreeMap<String, f64>>,
}

impl AblationResult {
    pub fn from_reports(suite: Suite, reports: Vec<EvalReport>) -> Self {
        let mut deltas = BTreeMap::new();
        if let Some(base) = reports.first().map(|r| r.aggregate()) {
            for r in &reports[1..] {
                let agg = r.aggregate();
                let d = agg.iter().filter_map(|(k, v)| base.get(k).map(|b| (k.clone(), v - b))).collect();
                deltas.insert(r.meta.label.clone(), d);
            }
        }
        Self { suite, reports, deltas }
    }

    pub fn arm(&self, name: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.meta.label == name)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("ablation {}\n", self.suite.name());
        for r in &self.reports {
            s.push_str(&format!("-- arm {}\n{}", r.meta.label, r.table()));
        }
        for (arm, d) in &self.deltas {
            let parts: Vec<String> = d.iter().map(|(k, v)| format!("{k} {v:+.4}")).collect();
            s.push_str(&format!("delta {arm} vs {}: {}\n", self.suite.arms()[0], parts.join(", ")));
        }
        s
    }
}

pub fn arm_dir(root: &Path, suite: Suite, arm: &str) -> PathBuf {
    root.join(suite.name()).join(arm)
}

/// Train (or reuse) every arm on `items`, evaluate each on `eval_samples`.
pub fn run_ablation(
    suite: Suite,
    arms: &[ArmSpec],
    items: &[TrainItem],
    eval_samples: &[TaskSample],
    codec: &LatentCodec,
    root: &Path,
    mode: ArmMode,
    mut progress: impl FnMut(&str),
) -> Result<AblationResult> {
    check_arms(suite, arms)?;
    let device = Device::Cpu;
    let mut reports = Vec::with_capacity(arms.len());
    for arm in arms {
        let dir = arm_dir(root, suite, &arm.name);
        let last = checkpoint_dir(&dir, arm.train.steps);
        if !last.join("checkpoint.json").exists() {
            if mode == ArmMode::EvalOnly {
                return Err(Error::NotFound(format!("arm `{}` has no checkpoint at {}", arm.name, last.display())));
            }
            let mut trainer = match latest_checkpoint(&dir)? {
                Some(ck) => Trainer::resume(&ck, Some(arm.train.clone()), &device)?,
                None => Trainer::new(arm.model.clone(), arm.train.clone(), &device)?,
            };
            if trainer.model.config != arm.model {
                return Err(Error::validation(format!("checkpoint of arm `{}` was trained with another model config", arm.name)));
            }
            progress(&format!("{}: training arm {} from step {}", suite.name(), arm.name, trainer.step()));
            trainer.run(items, Some(&dir), |_| {})?;
        }
        let model = load_model(&last, &device)?;
        if model.config != arm.model {
            return Err(Error::validation(format!("checkpoint of arm `{}` does not match its config", arm.name)));
        }
        progress(&format!("{}: evaluating arm {}", suite.name(), arm.name));
        let meta = ReportMeta {
            label: arm.name.clone(),
            checkpoint: Some(last.display().to_string()),
            config_hash: matched_hash(arm, suite)?,
            sampler_seed: arm.eval.sampler.seed,
        };
        reports.push(evaluate(&model, codec, eval_samples, &arm.eval, meta, |_, _| Ok(()))?);
    }
    Ok(AblationResult::from_reports(suite, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::synth::{overfit_set, CorpusConfig};
    use candle_core::DType;

    fn base() -> (ModelConfig, TrainConfig, EvalConfig) {
        let m = ModelConfig { dim: 32, heads: 2, text_dim: 32, dual_blocks: 1, single_blocks: 1, text_blocks: 1, ..Default::default() };
        let t = TrainConfig { steps: 2, batch_size: 1, checkpoint_every: 0, ..Default::default() };
        let e = EvalConfig { sampler: crate::flow::SamplerConfig { steps: 2, seed: 0 }, ..Default::default() };
        (m, t, e)
    }

    #[test]
    fn arms_differ_only_in_the_ablated_field() {
        let (m, t, e) = base();
        for suite in Suite::ALL {
            let arms = suite_arms(suite, &m, &t, &e).unwrap();
            assert_eq!(arms.len(), suite.arms().len());
            check_arms(suite, &arms).unwrap();
            let mut drift = arms.clone();
            drift[1].train.seed = 5;
            assert!(matches!(check_arms(suite, &drift), Err(Error::Validation(_))));
            let mut same = arms.clone();
            same[1].model = same[0].model.clone();
            assert!(check_arms(suite, &same).is_err());
        }
        assert_eq!("rope_shift".parse::<Suite>().unwrap(), Suite::RopeShift);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn identical_runs_give_identical_reports_and_eval_only_needs_checkpoints() {
        let (m, t, e) = base();
        let cfg = CorpusConfig { frames: 8, height: 32, width: 32, ..Default::default() };
        let samples: Vec<_> = overfit_set(&cfg).unwrap().into_iter().skip(6).collect();
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let items = TrainItem::from_samples(&codec, &samples, DType::F32, &Device::Cpu).unwrap();
        let arms = suite_arms(Suite::RopeShift, &m, &t, &e).unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert!(run_ablation(Suite::RopeShift, &arms, &items, &samples, &codec, d1.path(), ArmMode::EvalOnly, |_| {}).is_err());
        let a = run_ablation(Suite::RopeShift, &arms, &items, &samples, &codec, d1.path(), ArmMode::TrainMissing, |_| {}).unwrap();
        let b = run_ablation(Suite::RopeShift, &arms, &items, &samples, &codec, d2.path(), ArmMode::TrainMissing, |_| {}).unwrap();
        let strip = |r: &AblationResult| r.reports.iter().map(|x| x.samples.clone()).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.deltas.len(), 1);
        let again = run_ablation(Suite::RopeShift, &arms, &items, &samples, &codec, d1.path(), ArmMode::EvalOnly, |_| {}).unwrap();
        assert_eq!(strip(&a), strip(&again));
        assert!(a.summary().contains("delta without_shift"));
    }
}
