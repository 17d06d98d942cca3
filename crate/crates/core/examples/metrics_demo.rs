//! Score a target clip against degraded versions of itself with every
//! evaluation metric.
//!
//! cargo run --example metrics_demo -- [seed]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidfuse::eval::{evaluate_clip, EvalConfig};
use vidfuse::synth::corpus::build_task;
use vidfuse::synth::{CorpusConfig, TaskKind};
use vidfuse::video::VideoClip;

fn main() -> vidfuse::Result<()> {
    let seed = std::env::args().nth(1).map_or(1, |s| s.parse().expect("seed"));
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for task in [TaskKind::Inpaint, TaskKind::PoseDrive] {
        let s = build_task(&CorpusConfig::default(), task, seed)?;
        let mut noisy = s.target.clone();
        for v in noisy.data.iter_mut() {
            *v = (*v + 0.1 * (2.0 * rng.random::<f32>() - 1.0)).clamp(0.0, 1.0);
        }
        let frozen = VideoClip::from_frames(&vec![s.target.frame(0); s.target.frames])?;
        for (name, clip) in [("target", &s.target), ("noisy", &noisy), ("first frame held", &frozen)] {
            let m = evaluate_clip(clip, &s, &cfg)?;
            println!("{:<10} {:<17} {}", task.name(), name, serde_json::to_string(&m)?);
        }
    }
    Ok(())
}
