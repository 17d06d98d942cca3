//! Run configuration: one TOML file with a section per component.
//!
//! Precedence, highest first: command-line flags, the config file, defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::Suite;
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, EvalReport};
use crate::model::ModelConfig;
use crate::synth::CorpusConfig;
use crate::train::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "VIDFUSE_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// The corpus written by `gen-data`.
    #[default]
    Corpus,
    /// The built-in eight-clip overfit set.
    Overfit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Corpus root; defaults to `<out>/corpus`.
    pub corpus_dir: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    /// Use only the first `limit` samples of a split.
    pub limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Corpus, corpus_dir: None, train_split: "train".into(), eval_split: "eval".into(), limit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub suites: Vec<Suite>,
    /// Step budget per arm; defaults to `train.steps`.
    pub steps: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { suites: Suite::ALL.to_vec(), steps: None }
    }
}

/// Acceptance gates checked by `eval` and `ablate`; unset gates are skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub region_psnr_min: Option<f64>,
    pub temporal_consistency_min: Option<f64>,
    pub object_similarity_min: Option<f64>,
    pub pose_error_max: Option<f64>,
    pub dynamic_degree_inside_min: Option<f64>,
}

impl Thresholds {
    /// Failed gates as human-readable lines.
    pub fn check(&self, report: &EvalReport) -> Vec<String> {
        let agg = report.aggregate();
        let mut fails = Vec::new();
        let mut gate = |name: &str, bound: Option<f64>, min: bool| {
            let Some(b) = bound else { return };
            match agg.get(name) {
                None => fails.push(format!("{name}: not measured (gate {b})")),
                Some(&v) if (min && v < b) || (!min && v > b) => {
                    fails.push(format!("{name} = {v:.4} violates {} {b}", if min { ">=" } else { "<=" }))
                }
                _ => {}
            }
        };
        gate("region_psnr", self.region_psnr_min, true);
        gate("temporal_consistency", self.temporal_consistency_min, true);
        gate("object_similarity", self.object_similarity_min, true);
        gate("pose_error", self.pose_error_max, false);
        gate("dynamic_degree_inside", self.dynamic_degree_inside_min, true);
        fails
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Applied to every section's seed when set.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: None,
            codec: CodecConfig::default(),
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text)?;
        if let Some(s) = c.seed {
            c.set_seed(s);
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::NotFound(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.sampler.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.model.validate()?;
        self.corpus.validate()?;
        self.train.validate()?;
        self.eval.sampler.validate()?;
        self.codec.latent_dims(self.corpus.frames, self.corpus.height, self.corpus.width)?;
        if self.ablation.steps == Some(0) {
            return Err(Error::config("ablation.steps must be positive"));
        }
        Ok(())
    }

    /// Output root: explicit flag, then config, then the environment, then `runs`.
    pub fn resolve_out(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn corpus_dir(&self, out: &Path) -> PathBuf {
        self.data.corpus_dir.clone().unwrap_or_else(|| out.join("corpus"))
    }

    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// Write the resolved config and a version fingerprint into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header = format!("# {} {} config {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"), self.hash()?);
        std::fs::write(dir.join(RESOLVED_CONFIG), header + &self.to_toml()?)?;
        Ok(())
    }

    /// The micro overfit setup: eight built-in clips, no condition dropout.
    pub fn overfit() -> Self {
        let mut c = Self::default();
        c.data.source = DataSource::Overfit;
        c.train.dropout = crate::fusion::DropoutPolicy::OFF;
        c.train.optim.lr = 1e-3;
        c
    }
}
