//! Compare each pose-injection variant's output with all conditions present
//! against all conditions absent, at initialization.
//!
//! cargo run --example safe_start

use candle_core::{DType, Device};
use vidfuse::codec::{CodecConfig, LatentCodec};
use vidfuse::backbone::InjectionVariant;
use vidfuse::model::{EditModel, LatentConditions, ModelConfig};
use vidfuse::synth::{overfit_set, CorpusConfig};

fn main() -> vidfuse::Result<()> {
    let codec = LatentCodec::new(CodecConfig::default())?;
    let sample = &overfit_set(&CorpusConfig::default())?[4];
    for v in [InjectionVariant::Fusion, InjectionVariant::Controlnet, InjectionVariant::TokenAdd] {
        let m = EditModel::new(ModelConfig { injection: v, ..Default::default() }, DType::F32, &Device::Cpu)?;
        let cond = LatentConditions::encode(&codec, &sample.conditions()?, Some(&sample.prompt), DType::F32, &Device::Cpu)?;
        let z = codec.encode(&sample.target)?.to_tensor(&Device::Cpu)?;
        let a = m.forward(&z, 0.5, &cond)?.velocity;
        let b = m.forward(&z, 0.5, &LatentConditions::default())?.velocity;
        let d = (a - b)?.abs()?.max_all()?.to_scalar::<f32>()?;
        println!("{:<10} max |present - absent| = {d:e}", v.to_string());
    }
    Ok(())
}
