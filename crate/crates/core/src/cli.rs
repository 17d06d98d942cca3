//! Command-line front end: `gen-data | train | sample | eval | ablate`.
//!
//! Settings resolve as flag, then config file, then built-in default. The
//! output root resolves as `--out`, then `out_dir` in the config, then the
//! `VIDFUSE_OUT` environment variable, then `./runs`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};

use crate::ablation::{arm_dir, check_arms, run_ablation, suite_arms, ArmMode, Suite};
use crate::codec::LatentCodec;
use crate::config::{DataSource, RunConfig, RESOLVED_CONFIG};
use crate::error::{Error, Result};
use crate::eval::{evaluate, generate_with, EvalReport, ReportMeta};
use crate::fusion::Presence;
use crate::model::{EditModel, LatentConditions};
use crate::synth::{generate_split, load_sample, manifest_hash, overfit_set, read_manifest, task_counts, write_samples, TaskSample};
use crate::train::{latest_checkpoint, load_model, read_checkpoint_meta, TrainItem, Trainer, LOSS_LOG};

/// Exit code when a configured threshold fails.
pub const EXIT_THRESHOLD: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "vidfuse", version, about = "Condition-fused video editing on synthetic clips")]
pub struct Cli {
    /// TOML run config; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (default: config `out_dir`, then $VIDFUSE_OUT, then ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Clear a non-empty output directory instead of refusing or resuming.
    #[arg(long, global = true)]
    pub force: bool,
    /// Validate and report what would run, without running it.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Checkpoint directory to resume from or evaluate (default: latest under <out>/train).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus and its manifest.
    GenData,
    /// Train, resuming from the latest checkpoint when one exists.
    Train {
        /// Override `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate clips for the given sample ids (all of the split when none are given).
    Sample {
        ids: Vec<String>,
        #[arg(long)]
        split: Option<String>,
        /// Drop every condition stream.
        #[arg(long)]
        unconditional: bool,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and compare matched arms.
    Ablate {
        /// Suites to run (default: config `ablation.suites`).
        #[arg(long = "suite")]
        suites: Vec<Suite>,
        /// Fail instead of training arms without a final checkpoint.
        #[arg(long)]
        eval_only: bool,
    },
}

/// What a finished command reports back to `main`.
#[derive(Debug, Default)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub threshold_failures: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.threshold_failures.is_empty() {
            0
        } else {
            EXIT_THRESHOLD
        }
    }
}

/// Parse the process arguments, run, and return the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout();
    match run(cli, &mut stdout) {
        Ok(o) => {
            for f in &o.threshold_failures {
                eprintln!("threshold failed: {f}");
            }
            o.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Command::Train { steps: Some(n) } = cli.command {
        cfg.train.steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli, log: &mut dyn Write) -> Result<Outcome> {
    let cfg = resolve_config(&cli)?;
    let root = cfg.resolve_out(cli.out.as_deref());
    let ctx = Ctx { cfg, root, cli: &cli };
    match &cli.command {
        Command::GenData => ctx.gen_data(log),
        Command::Train { .. } => ctx.train(log),
        Command::Sample { ids, split, unconditional } => ctx.sample(ids, split.as_deref(), *unconditional, log),
        Command::Eval { split } => ctx.eval(split.as_deref(), log),
        Command::Ablate { suites, eval_only } => ctx.ablate(suites, *eval_only, log),
    }
}

struct Ctx<'a> {
    cfg: RunConfig,
    root: PathBuf,
    cli: &'a Cli,
}

fn is_nonempty(dir: &Path) -> Result<bool> {
    Ok(dir.exists() && std::fs::read_dir(dir)?.next().is_some())
}

impl Ctx<'_> {
    /// Refuse a non-empty `dir` unless `--force`, which clears it.
    fn fresh_dir(&self, dir: &Path) -> Result<()> {
        if is_nonempty(dir)? {
            if !self.cli.force {
                return Err(Error::NonEmptyOutput(dir.to_path_buf()));
            }
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::create_dir_all(dir)?;
        Ok(())
    }

    fn codec(&self) -> Result<LatentCodec> {
        LatentCodec::new(self.cfg.codec.clone())
    }

    fn gen_data(&self, log: &mut dyn Write) -> Result<Outcome> {
        let dir = self.cfg.corpus_dir(&self.root);
        let c = &self.cfg.corpus;
        if self.cli.dry_run {
            writeln!(log, "would write {} train + {} eval samples ({}x{}x{}) to {}", c.train, c.eval, c.frames, c.height, c.width, dir.display())?;
            return Ok(Outcome { out_dir: dir, ..Default::default() });
        }
        self.fresh_dir(&dir)?;
        for (split, n) in [(self.cfg.data.train_split.as_str(), c.train), (self.cfg.data.eval_split.as_str(), c.eval)] {
            let samples = generate_split(c, split, n)?;
            write_samples(&dir, split, &samples, c.png)?;
        }
        self.cfg.write_resolved(&dir)?;
        let records = read_manifest(&dir)?;
        for split in [&self.cfg.data.train_split, &self.cfg.data.eval_split] {
            let recs: Vec<_> = records.iter().filter(|r| &r.split == split).cloned().collect();
            let counts: Vec<String> = task_counts(&recs).iter().map(|(k, v)| format!("{}={v}", k.name())).collect();
            writeln!(log, "{split}: {} samples ({})", recs.len(), counts.join(" "))?;
        }
        writeln!(log, "manifest {} sha256 {}", dir.display(), manifest_hash(&dir)?)?;
        Ok(Outcome { out_dir: dir, ..Default::default() })
    }

    /// Error unless the corpus on disk was generated with this geometry.
    fn check_corpus(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        if !path.exists() {
            return Err(Error::NotFound(format!("no corpus at {} (run gen-data first)", dir.display())));
        }
        let made = RunConfig::load(&path)?;
        let (a, b) = (&made.corpus, &self.cfg.corpus);
        if (a.frames, a.height, a.width) != (b.frames, b.height, b.width) {
            return Err(Error::validation(format!(
                "corpus at {} holds {}x{}x{} clips but the config expects {}x{}x{}",
                dir.display(),
                a.frames,
                a.height,
                a.width,
                b.frames,
                b.height,
                b.width
            )));
        }
        Ok(())
    }

    fn load_split(&self, split: &str) -> Result<Vec<TaskSample>> {
        let mut samples = match self.cfg.data.source {
            DataSource::Overfit => overfit_set(&self.cfg.corpus)?,
            DataSource::Corpus => {
                let dir = self.cfg.corpus_dir(&self.root);
                self.check_corpus(&dir)?;
                let recs: Vec<_> = read_manifest(&dir)?.into_iter().filter(|r| r.split == split).collect();
                if recs.is_empty() {
                    return Err(Error::NotFound(format!("split `{split}` is empty in {}", dir.display())));
                }
                recs.iter().map(|r| load_sample(&dir, r)).collect::<Result<Vec<_>>>()?
            }
        };
        if let Some(n) = self.cfg.data.limit {
            samples.truncate(n);
        }
        Ok(samples)
    }

    fn items(&self, samples: &[TaskSample]) -> Result<Vec<TrainItem>> {
        TrainItem::from_samples(&self.codec()?, samples, DType::F32, &Device::Cpu)
    }

    fn train(&self, log: &mut dyn Write) -> Result<Outcome> {
        let dir = self.root.join("train");
        let device = Device::Cpu;
        if self.cli.dry_run {
            let model = EditModel::new(self.cfg.model.clone(), DType::F32, &device)?;
            writeln!(log, "config ok; parameters: {}", model.param_count())?;
            writeln!(log, "would train {} steps into {}", self.cfg.train.steps, dir.display())?;
            return Ok(Outcome { out_dir: dir, ..Default::default() });
        }
        let samples = self.load_split(&self.cfg.data.train_split)?;
        let start = match &self.cli.checkpoint {
            Some(ck) => Some(ck.clone()),
            None if self.cli.force => None,
            None => latest_checkpoint(&dir)?,
        };
        if start.is_none() {
            self.fresh_dir(&dir)?;
        }
        let mut trainer = match &start {
            Some(ck) => Trainer::resume(ck, Some(self.cfg.train.clone()), &device)?,
            None => Trainer::new(self.cfg.model.clone(), self.cfg.train.clone(), &device)?,
        };
        if trainer.model.config != self.cfg.model {
            return Err(Error::validation("checkpoint was trained with a different model config"));
        }
        self.cfg.write_resolved(&dir)?;
        let items = self.items(&samples)?;
        writeln!(log, "training {} items, {} parameters, from step {}", items.len(), trainer.model.param_count(), trainer.step())?;
        let t0 = Instant::now();
        let every = (self.cfg.train.steps / 20).max(1);
        let records = trainer.run(&items, Some(&dir), |r| {
            if r.step % every == 0 {
                let _ = writeln!(log, "step {:>6}  loss {:.4}  lr {:.2e}  {:.0}s", r.step, r.loss, r.lr, t0.elapsed().as_secs_f64());
            }
        })?;
        if let Some(last) = records.last() {
            writeln!(log, "done at step {}; loss log {}", last.step + 1, dir.join(LOSS_LOG).display())?;
        } else {
            writeln!(log, "already at step {}", trainer.step())?;
        }
        Ok(Outcome { out_dir: dir, ..Default::default() })
    }

    fn checkpoint(&self) -> Result<PathBuf> {
        match &self.cli.checkpoint {
            Some(p) => Ok(p.clone()),
            None => latest_checkpoint(&self.root.join("train"))?
                .ok_or_else(|| Error::NotFound(format!("no checkpoint under {} (pass --checkpoint)", self.root.join("train").display()))),
        }
    }

    fn load_checkpoint(&self) -> Result<(PathBuf, EditModel)> {
        let ck = self.checkpoint()?;
        let meta = read_checkpoint_meta(&ck)?;
        if meta.model != self.cfg.model {
            return Err(Error::validation(format!("checkpoint {} does not match the model config", ck.display())));
        }
        let model = load_model(&ck, &Device::Cpu)?;
        Ok((ck, model))
    }

    fn sample(&self, ids: &[String], split: Option<&str>, unconditional: bool, log: &mut dyn Write) -> Result<Outcome> {
        let split = split.unwrap_or(&self.cfg.data.eval_split);
        let samples = self.load_split(split)?;
        let chosen: Vec<&TaskSample> = if ids.is_empty() {
            samples.iter().collect()
        } else {
            ids.iter()
                .map(|id| {
                    samples.iter().find(|s| &s.id == id).ok_or_else(|| {
                        let known: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
                        Error::NotFound(format!("sample `{id}` not in split `{split}`; available: {}", known.join(", ")))
                    })
                })
                .collect::<Result<_>>()?
        };
        let dir = self.root.join("samples");
        if self.cli.dry_run {
            writeln!(log, "would sample {} clips into {}", chosen.len(), dir.display())?;
            return Ok(Outcome { out_dir: dir, ..Default::default() });
        }
        let (ck, model) = self.load_checkpoint()?;
        self.fresh_dir(&dir)?;
        self.cfg.write_resolved(&dir)?;
        let codec = self.codec()?;
        let sampler = &self.cfg.eval.sampler;
        let mut index = std::fs::File::create(dir.join("samples.jsonl"))?;
        for s in chosen {
            let t0 = Instant::now();
            let mut cond = LatentConditions::encode(&codec, &s.conditions()?, Some(&s.prompt), model.dtype(), model.device())?;
            if unconditional {
                cond = cond.routed(Presence::NONE);
            }
            let clip = generate_with(&model, &codec, &cond, &s.target, sampler)?;
            let secs = t0.elapsed().as_secs_f64();
            crate::tensor_io::write_clip(&dir.join(format!("{}.vft", s.id)), &clip)?;
            crate::frames::write_frame_grid(&dir.join(format!("{}.png", s.id)), &clip)?;
            let rec = serde_json::json!({
                "id": s.id, "task": s.task, "checkpoint": ck.display().to_string(),
                "sampler_seed": sampler.seed, "sampler_steps": sampler.steps,
                "unconditional": unconditional, "seconds": secs,
            });
            writeln!(index, "{rec}")?;
            writeln!(log, "{} ({}) {:.2}s", s.id, s.task.name(), secs)?;
        }
        Ok(Outcome { out_dir: dir, ..Default::default() })
    }

    fn eval(&self, split: Option<&str>, log: &mut dyn Write) -> Result<Outcome> {
        let split = split.unwrap_or(&self.cfg.data.eval_split);
        let samples = self.load_split(split)?;
        let dir = self.root.join("eval").join(split);
        if self.cli.dry_run {
            writeln!(log, "would evaluate {} samples into {}", samples.len(), dir.display())?;
            return Ok(Outcome { out_dir: dir, ..Default::default() });
        }
        let (ck, model) = self.load_checkpoint()?;
        self.fresh_dir(&dir)?;
        self.cfg.write_resolved(&dir)?;
        let meta = ReportMeta {
            label: split.to_string(),
            checkpoint: Some(ck.display().to_string()),
            config_hash: self.cfg.hash()?,
            sampler_seed: self.cfg.eval.sampler.seed,
        };
        let report = evaluate(&model, &self.codec()?, &samples, &self.cfg.eval, meta, |_, _| Ok(()))?;
        self.finish_report(&report, &dir, log)
    }

    fn finish_report(&self, report: &EvalReport, dir: &Path, log: &mut dyn Write) -> Result<Outcome> {
        report.write_jsonl(&dir.join("report.jsonl"))?;
        let table = report.table();
        std::fs::write(dir.join("table.txt"), &table)?;
        write!(log, "{table}")?;
        let threshold_failures = self.cfg.thresholds.check(report).into_iter().map(|f| format!("{}: {f}", report.meta.label)).collect();
        Ok(Outcome { out_dir: dir.to_path_buf(), threshold_failures })
    }

    fn ablate(&self, suites: &[Suite], eval_only: bool, log: &mut dyn Write) -> Result<Outcome> {
        let suites = if suites.is_empty() { self.cfg.ablation.suites.clone() } else { suites.to_vec() };
        let dir = self.root.join("ablate");
        let mut train = self.cfg.train.clone();
        if let Some(n) = self.cfg.ablation.steps {
            train.steps = n;
        }
        let plans = suites
            .iter()
            .map(|&s| {
                let arms = suite_arms(s, &self.cfg.model, &train, &self.cfg.eval)?;
                check_arms(s, &arms)?;
                Ok((s, arms))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.cli.dry_run {
            for (s, arms) in &plans {
                let names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
                writeln!(log, "{}: arms {} at {} steps", s.name(), names.join(", "), train.steps)?;
            }
            return Ok(Outcome { out_dir: dir, ..Default::default() });
        }
        if self.cli.force && !eval_only {
            self.fresh_dir(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        self.cfg.write_resolved(&dir)?;
        let train_samples = self.load_split(&self.cfg.data.train_split)?;
        let eval_samples = self.load_split(&self.cfg.data.eval_split)?;
        let items = self.items(&train_samples)?;
        let codec = self.codec()?;
        let mode = if eval_only { ArmMode::EvalOnly } else { ArmMode::TrainMissing };
        let mut outcome = Outcome { out_dir: dir.clone(), ..Default::default() };
        for (suite, arms) in &plans {
            let result = run_ablation(*suite, arms, &items, &eval_samples, &codec, &dir, mode, |m| {
                let _ = writeln!(log, "{m}");
            })?;
            for r in &result.reports {
                let arm = arm_dir(&dir, *suite, &r.meta.label);
                std::fs::create_dir_all(&arm)?;
                r.write_jsonl(&arm.join("report.jsonl"))?;
                outcome.threshold_failures.extend(
                    self.cfg.thresholds.check(r).into_iter().map(|f| format!("{}/{}: {f}", suite.name(), r.meta.label)),
                );
            }
            let summary = result.summary();
            std::fs::write(dir.join(suite.name()).join("summary.txt"), &summary)?;
            std::fs::write(dir.join(suite.name()).join("result.json"), serde_json::to_string_pretty(&result)?)?;
            write!(log, "{summary}")?;
        }
        Ok(outcome)
    }
}

