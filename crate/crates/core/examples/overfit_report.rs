//! Score an overfit checkpoint on the eight training clips: editing fidelity,
//! pose error against the untrained model, and pose-swap sensitivity.
//!
//! cargo run --example overfit_report -- <checkpoint_dir>

use candle_core::{DType, Device};
use vidfuse::codec::{CodecConfig, LatentCodec};
use vidfuse::eval::{evaluate, pose_swap, EvalConfig, ReportMeta};
use vidfuse::model::EditModel;
use vidfuse::synth::{overfit_set, CorpusConfig, TaskKind};
use vidfuse::train::{load_model, read_checkpoint_meta};

fn main() -> vidfuse::Result<()> {
    let ck = std::env::args().nth(1).expect("usage: overfit_report <checkpoint_dir>");
    let ck = std::path::Path::new(&ck);
    let device = Device::Cpu;
    let codec = LatentCodec::new(CodecConfig::default())?;
    let set = overfit_set(&CorpusConfig::default())?;
    let cfg = EvalConfig::default();
    let meta = |label: &str| ReportMeta { label: label.into(), checkpoint: None, config_hash: String::new(), sampler_seed: cfg.sampler.seed };

    let trained = load_model(ck, &device)?;
    let initial = EditModel::new(read_checkpoint_meta(ck)?.model, DType::F32, &device)?;
    let after = evaluate(&trained, &codec, &set, &cfg, meta("trained"), |_, _| Ok(()))?;
    let before = evaluate(&initial, &codec, &set, &cfg, meta("initial"), |_, _| Ok(()))?;
    print!("{}", before.table());
    print!("{}", after.table());

    let pose: Vec<_> = set.iter().filter(|s| s.task == TaskKind::PoseDrive).collect();
    let pen = |r: &vidfuse::eval::EvalReport| {
        let v: Vec<f64> = r.samples.iter().filter_map(|s| s.pose_error_penalized).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    println!("pose error (penalized) {:.2} -> {:.2} px", pen(&before), pen(&after));
    for (i, s) in pose.iter().enumerate() {
        let other = pose[(i + 1) % pose.len()];
        let r = pose_swap(&trained, &codec, s, other, &cfg.sampler, cfg.sampler.seed + 1)?;
        println!("{}: swap {:.3}  reseed {:.3}  ratio {:.1}", s.id, r.swap, r.reseed, r.ratio());
    }
    Ok(())
}
