//! Train every arm of one ablation suite on the four pose-driven overfit clips
//! (one figure, four motions) at an equal step budget and print the per-arm
//! tables and deltas.
//!
//! cargo run --example ablation -- [suite] [steps] [out_dir]

use candle_core::{DType, Device};
use vidfuse::ablation::{run_ablation, suite_arms, ArmMode, Suite};
use vidfuse::codec::{CodecConfig, LatentCodec};
use vidfuse::eval::EvalConfig;
use vidfuse::model::ModelConfig;
use vidfuse::fusion::DropoutPolicy;
use vidfuse::optim::OptimConfig;
use vidfuse::synth::{overfit_set, CorpusConfig, TaskKind};
use vidfuse::train::{TrainConfig, TrainItem};

fn main() -> vidfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let suite: Suite = args.first().map_or("posenet_variants", String::as_str).parse()?;
    let steps = args.get(1).map_or(200, |s| s.parse().expect("steps"));
    let out = std::path::PathBuf::from(args.get(2).map_or("ablation_runs", String::as_str));

    let samples: Vec<_> = overfit_set(&CorpusConfig::default())?.into_iter().filter(|s| s.task == TaskKind::PoseDrive).collect();
    let codec = LatentCodec::new(CodecConfig::default())?;
    let items = TrainItem::from_samples(&codec, &samples, DType::F32, &Device::Cpu)?;
    let train = TrainConfig {
        steps,
        checkpoint_every: 0,
        optim: OptimConfig { lr: 1e-3, warmup_steps: 50, ..Default::default() },
        dropout: DropoutPolicy::OFF,
        ..Default::default()
    };
    let arms = suite_arms(suite, &ModelConfig::default(), &train, &EvalConfig::default())?;
    let result = run_ablation(suite, &arms, &items, &samples, &codec, &out, ArmMode::TrainMissing, |m| println!("{m}"))?;
    print!("{}", result.summary());
    Ok(())
}
