//! Load a checkpoint and generate each clip of the overfit set, writing the
//! generated and target frame grids side by side.
//!
//! cargo run --example generate -- <checkpoint_dir> [out_dir] [sampler_steps]

use candle_core::Device;
use vidfuse::codec::{CodecConfig, LatentCodec};
use vidfuse::eval::generate;
use vidfuse::flow::SamplerConfig;
use vidfuse::frames::write_frame_grid;
use vidfuse::metrics::pixel_l2;
use vidfuse::synth::{overfit_set, CorpusConfig};
use vidfuse::train::load_model;

fn main() -> vidfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ck = args.first().expect("usage: generate <checkpoint_dir> [out_dir] [sampler_steps]");
    let out = std::path::PathBuf::from(args.get(1).map_or("generated", String::as_str));
    let sampler = SamplerConfig { steps: args.get(2).map_or(10, |s| s.parse().expect("steps")), ..Default::default() };
    let model = load_model(std::path::Path::new(ck), &Device::Cpu)?;
    let codec = LatentCodec::new(CodecConfig::default())?;
    std::fs::create_dir_all(&out)?;
    for s in overfit_set(&CorpusConfig::default())? {
        let clip = generate(&model, &codec, &s, &sampler)?;
        write_frame_grid(&out.join(format!("{}.png", s.id)), &clip)?;
        write_frame_grid(&out.join(format!("{}-target.png", s.id)), &s.target)?;
        println!("{:<12} {:<10} L2 to target {:.3}", s.id, s.task.name(), pixel_l2(&clip, &s.target)?);
    }
    println!("frame grids in {}", out.display());
    Ok(())
}
