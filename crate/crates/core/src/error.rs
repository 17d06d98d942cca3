use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on axis `{axis}`: {msg}")]
    Dimension { axis: &'static str, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("scene error: {0}")]
    Spec(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite loss at step {step} (batch seed {seed})")]
    NonFiniteLoss { step: usize, seed: u64 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("refusing to write into non-empty directory {0} (use --force)")]
    NonEmptyOutput(PathBuf),

    #[error("bad tensor file {path}: {msg}")]
    TensorFile { path: PathBuf, msg: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
