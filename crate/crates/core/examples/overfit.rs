//! Overfit the eight-clip set and report the probe loss before and after.
//!
//! cargo run --example overfit -- [steps] [lr] [out_dir]

use std::time::Instant;

use candle_core::{DType, Device};
use vidfuse::codec::{CodecConfig, LatentCodec};
use vidfuse::fusion::DropoutPolicy;
use vidfuse::model::ModelConfig;
use vidfuse::optim::OptimConfig;
use vidfuse::synth::{overfit_set, CorpusConfig};
use vidfuse::train::{probe_loss, TrainConfig, TrainItem, Trainer, PROBE_TIMESTEPS};

fn main() -> vidfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().map_or(2000, |s| s.parse().expect("steps"));
    let lr = args.get(1).map_or(1e-3, |s| s.parse().expect("lr"));
    let out = args.get(2).map(std::path::PathBuf::from);

    let device = Device::Cpu;
    let codec = LatentCodec::new(CodecConfig::default())?;
    let items = TrainItem::from_samples(&codec, &overfit_set(&CorpusConfig::default())?, DType::F32, &device)?;
    let cfg = TrainConfig {
        steps,
        optim: OptimConfig { lr, warmup_steps: 50, ..Default::default() },
        dropout: DropoutPolicy::OFF,
        ..Default::default()
    };
    let mut trainer = Trainer::new(ModelConfig::default(), cfg, &device)?;
    println!("parameters: {}", trainer.model.param_count());
    let before = probe_loss(&trainer.model, &items, 0, &PROBE_TIMESTEPS)?;
    let start = Instant::now();
    trainer.run(&items, out.as_deref(), |r| {
        if r.step % 100 == 0 {
            println!("step {:5}  loss {:.4}  lr {:.2e}  |g| {:.3}  {:.1}s", r.step, r.loss, r.lr, r.grad_norm, start.elapsed().as_secs_f64());
        }
    })?;
    let after = probe_loss(&trainer.model, &items, 0, &PROBE_TIMESTEPS)?;
    println!("probe loss {before:.4} -> {after:.4} ({:.1}%) in {:.1}s", 100.0 * after / before, start.elapsed().as_secs_f64());
    Ok(())
}
