//! Flow-matching training loop, checkpoints and the loss log.
//!
//! Every step draws its randomness from a seed derived from the run seed and
//! the step index, so a run resumed from a checkpoint replays the remaining
//! steps exactly.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::flow::{make_training_sample, masked_mse, randn, FlowSample, LogitNormal};
use crate::fusion::{route, DropoutPolicy, Presence};
use crate::model::{EditModel, LatentConditions, ModelConfig};
use crate::optim::{AdamW, OptimConfig};
use crate::params::name_hash;
use crate::synth::TaskSample;
use crate::tokenizers::patchify;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const LOSS_LOG: &str = "loss.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// `0` keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub timestep: LogitNormal,
    pub optim: OptimConfig,
    pub dropout: DropoutPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            checkpoint_every: 500,
            seed: 0,
            timestep: LogitNormal::default(),
            optim: OptimConfig { warmup_steps: 50, ..Default::default() },
            dropout: DropoutPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        self.timestep.validate()?;
        self.optim.validate()?;
        self.dropout.validate()
    }

    pub fn step_seed(&self, step: usize) -> u64 {
        self.seed ^ name_hash(&format!("train-step/{step}"))
    }
}

/// One training example with its latents precomputed (the codec is frozen).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    /// Clean target latent `(T, H, W, 16)`.
    pub z1: Tensor,
    pub cond: LatentConditions,
}

impl TrainItem {
    pub fn from_sample(codec: &LatentCodec, sample: &TaskSample, dtype: DType, device: &Device) -> Result<Self> {
        let z1 = codec.encode(&sample.target)?.to_tensor(device)?.to_dtype(dtype)?;
        let cond = LatentConditions::encode(codec, &sample.conditions()?, Some(&sample.prompt), dtype, device)?;
        Ok(Self { id: sample.id.clone(), z1, cond })
    }

    pub fn from_samples(codec: &LatentCodec, samples: &[TaskSample], dtype: DType, device: &Device) -> Result<Vec<Self>> {
        samples.iter().map(|s| Self::from_sample(codec, s, dtype, device)).collect()
    }
}

/// Flow loss of one item: masked MSE over the output rows of the video tokens.
pub fn flow_loss(model: &EditModel, z1: &Tensor, cond: &LatentConditions, fs: &FlowSample) -> Result<Tensor> {
    let out = model.forward(&fs.z_t, fs.t, cond)?;
    let target_video = patchify(&fs.u_t, model.config.patch)?;
    let n_ref = out.input.num_reference();
    let target = if n_ref > 0 {
        let pad = Tensor::zeros((n_ref, target_video.dim(1)?), target_video.dtype(), target_video.device())?;
        Tensor::cat(&[&pad, &target_video], 0)?
    } else {
        target_video
    };
    debug_assert_eq!(z1.dims(), fs.z1.dims());
    masked_mse(&out.tokens, &target, &out.input.loss_mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
    pub grad_norm: f64,
}

/// Mean flow loss over a batch, routed with the step's own randomness.
pub fn batch_loss(model: &EditModel, items: &[TrainItem], cfg: &TrainConfig, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let picked = &order[..cfg.batch_size.min(items.len())];
    let mut total: Option<Tensor> = None;
    for &i in picked {
        let item = &items[i];
        let presence = route(item.cond.presence(), &mut rng, &cfg.dropout)?;
        let cond = item.cond.routed(presence);
        let fs = make_training_sample(&item.z1, &mut rng, &cfg.timestep)?;
        let l = flow_loss(model, &item.z1, &cond, &fs)?;
        total = Some(match total {
            None => l,
            Some(acc) => (acc + l)?,
        });
    }
    let total = total.ok_or_else(|| Error::validation("empty training set"))?;
    Ok((total / picked.len() as f64)?)
}

/// Fixed-noise, fixed-timestep loss over every item with all conditions
/// present. Deterministic, so it compares checkpoints without sampling noise.
pub fn probe_loss(model: &EditModel, items: &[TrainItem], seed: u64, timesteps: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, item) in items.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&format!("probe/{i}")));
        for &t in timesteps {
            let z0 = randn(item.z1.dims(), &mut rng, item.z1.dtype(), item.z1.device())?;
            let fs = FlowSample::new(z0, item.z1.clone(), t)?;
            sum += flow_loss(model, &item.z1, &item.cond, &fs)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

pub const PROBE_TIMESTEPS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Model, optimizer and step counter of a run.
pub struct Trainer {
    pub model: EditModel,
    pub opt: AdamW,
    pub cfg: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = EditModel::new(model_cfg, DType::F32, device)?;
        let opt = AdamW::new(model.params.trainable_vars(), cfg.optim)?;
        Ok(Self { model, opt, cfg })
    }

    pub fn step(&self) -> usize {
        self.opt.step_count()
    }

    /// Run one optimizer step and return its log record.
    pub fn train_step(&mut self, items: &[TrainItem]) -> Result<StepRecord> {
        let step = self.step();
        let seed = self.cfg.step_seed(step);
        let loss = batch_loss(&self.model, items, &self.cfg, seed)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, seed });
        }
        let grads = loss.backward()?;
        let grad_norm = self.opt.grad_norm(&grads)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, seed });
        }
        let lr = self.cfg.optim.lr_at(step, self.cfg.steps);
        self.opt.step(&grads, lr)?;
        Ok(StepRecord { step, loss: value, lr, seed, grad_norm })
    }

    /// Train until `cfg.steps`, writing the loss log and checkpoints under `out`.
    pub fn run(&mut self, items: &[TrainItem], out: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(open_log(&dir.join(LOSS_LOG), self.step())?)
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step() < self.cfg.steps {
            let rec = self.train_step(items)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            on_step(&rec);
            records.push(rec);
            let done = self.step();
            let periodic = self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0;
            if let Some(dir) = out {
                if periodic || done == self.cfg.steps {
                    self.save_checkpoint(&checkpoint_dir(dir, done))?;
                }
            }
        }
        if let Some(f) = log.as_mut() {
            f.flush()?;
        }
        Ok(records)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.safetensors"))?;
        candle_core::safetensors::save(&self.opt.state_tensors(), dir.join("optim.safetensors"))?;
        let meta = CheckpointMeta { format: CHECKPOINT_FORMAT, step: self.step(), model: self.model.config.clone(), train: self.cfg.clone() };
        fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Rebuild a run from a checkpoint. `cfg` may extend `steps`; every other
    /// field must match what the checkpoint was trained with.
    pub fn resume(dir: &Path, cfg: Option<TrainConfig>, device: &Device) -> Result<Self> {
        let meta = read_checkpoint_meta(dir)?;
        let cfg = match cfg {
            Some(c) => {
                let mut a = c.clone();
                a.steps = meta.train.steps;
                if a != meta.train {
                    return Err(Error::validation("training config differs from the checkpoint's (only `steps` may change)"));
                }
                c
            }
            None => meta.train.clone(),
        };
        let mut t = Self::new(meta.model, cfg, device)?;
        t.model.load(&dir.join("model.safetensors"))?;
        let state: HashMap<String, Tensor> = candle_core::safetensors::load(dir.join("optim.safetensors"), device)?;
        t.opt.load_state(&state, meta.step)?;
        Ok(t)
    }
}

pub fn checkpoint_dir(root: &Path, step: usize) -> PathBuf {
    root.join(format!("ckpt-{step:06}"))
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Unsupported(format!("checkpoint format {} (expected {CHECKPOINT_FORMAT})", meta.format)));
    }
    Ok(meta)
}

/// Latest checkpoint directory under a run root, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let Some(step) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("ckpt-")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        if path.join("checkpoint.json").exists() && best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Load a model (weights only) from a checkpoint directory.
pub fn load_model(dir: &Path, device: &Device) -> Result<EditModel> {
    let meta = read_checkpoint_meta(dir)?;
    let model = EditModel::new(meta.model, DType::F32, device)?;
    model.load(&dir.join("model.safetensors"))?;
    Ok(model)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = fs::File::open(path)?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Open the log for appending, dropping records at or after `from_step`
/// (left behind by a run that stopped between checkpoints).
fn open_log(path: &Path, from_step: usize) -> Result<fs::File> {
    let kept: Vec<StepRecord> = if path.exists() && from_step > 0 {
        read_loss_log(path)?.into_iter().filter(|r| r.step < from_step).collect()
    } else {
        Vec::new()
    };
    let mut f = fs::File::create(path)?;
    for r in &kept {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(f)
}

/// Condition presence summary used by logs and reports.
pub fn presence_label(p: Presence) -> String {
    let mut parts = Vec::new();
    for (on, name) in [(p.mask, "mask"), (p.pose, "pose"), (p.reference, "reference"), (p.text, "text")] {
        if on {
            parts.push(name);
        }
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("+")
    }
}
