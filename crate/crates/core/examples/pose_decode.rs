//! Render a pose-driven sample and recover its joints from both the pose
//! video and the target clip, before and after the latent codec.
//!
//! cargo run --example pose_decode -- [seed]

use vidfuse::codec::{CodecConfig, LatentCodec};
use vidfuse::metrics::pose_error;
use vidfuse::synth::scene::color_rgb;
use vidfuse::synth::corpus::build_task;
use vidfuse::synth::{CorpusConfig, JointDecoder, TaskKind};

fn main() -> vidfuse::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let s = build_task(&CorpusConfig::default(), TaskKind::PoseDrive, seed)?;
    let pose = s.pose.as_ref().expect("pose-driven samples carry a pose video");
    let body = color_rgb(s.meta["figure"]["color"].as_u64().unwrap_or(0) as usize);
    let dec = JointDecoder::default();
    let codec = LatentCodec::new(CodecConfig::default())?;
    let coded = codec.decode(&codec.encode(&s.target)?)?;
    for (name, clip) in [("target", &s.target), ("target through codec", &coded)] {
        let e = pose_error(clip, pose, body, &dec)?;
        println!("{name:<22} mean error {:?} px, {} of {} joints missing", e.mean_px.map(|v| (v * 100.0).round() / 100.0), e.missing, e.total);
    }
    println!("prompt: \"{}\"", s.prompt.text_prompt);
    Ok(())
}
