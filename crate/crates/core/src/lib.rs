pub mod ablation;
pub mod backbone;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod frames;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rope;
pub mod synth;
pub mod tensor_io;
pub mod text;
pub mod train;
pub mod tokenizers;
pub mod video;

pub use error::{Error, Result};
