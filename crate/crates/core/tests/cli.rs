//! Command-line behavior on a tiny config.

use std::path::Path;
use std::process::Command as Proc;
use std::time::Instant;

use clap::Parser;
use vidfuse::cli::{run, Cli, Outcome, EXIT_THRESHOLD};
use vidfuse::config::RESOLVED_CONFIG;
use vidfuse::synth::{manifest_hash, read_manifest, task_counts, TaskKind};
use vidfuse::tensor_io::read_clip;
use vidfuse::train::read_loss_log;
use vidfuse::Error;

const TINY: &str = r#"
seed = 3
[corpus]
train = 5
eval = 3
[model]
dim = 32
heads = 2
text_dim = 32
dual_blocks = 1
single_blocks = 1
text_blocks = 1
[train]
steps = 4
batch_size = 2
checkpoint_every = 2
[eval.sampler]
steps = 2
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.display().to_string()
}

fn go(args: &[&str]) -> (vidfuse::Result<Outcome>, String) {
    let cli = Cli::try_parse_from(std::iter::once("vidfuse").chain(args.iter().copied())).unwrap();
    let mut log = Vec::new();
    let r = run(cli, &mut log);
    (r, String::from_utf8(log).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (r, log) = go(args);
    r.unwrap_or_else(|e| panic!("{args:?}: {e}"));
    log
}

#[test]
fn default_config_plans_the_full_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let log = ok(&["gen-data", "--dry-run", "--out", &out]);
    assert!(log.contains("256 train + 32 eval"), "{log}");
    assert!(!dir.path().join("corpus").exists());
}

#[test]
fn gen_data_is_deterministic_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a").display().to_string(), dir.path().join("b").display().to_string());
    let log = ok(&["gen-data", "--config", &cfg, "--out", &a]);
    assert!(log.contains("train: 5 samples") && log.contains("eval: 3 samples"), "{log}");
    ok(&["gen-data", "--config", &cfg, "--out", &b]);
    let ha = manifest_hash(&Path::new(&a).join("corpus")).unwrap();
    assert_eq!(ha, manifest_hash(&Path::new(&b).join("corpus")).unwrap());
    assert!(Path::new(&a).join("corpus").join(RESOLVED_CONFIG).exists());

    let (r, _) = go(&["gen-data", "--config", &cfg, "--out", &a]);
    assert!(matches!(r, Err(Error::NonEmptyOutput(_))));
    ok(&["gen-data", "--config", &cfg, "--out", &a, "--force"]);
    assert_eq!(ha, manifest_hash(&Path::new(&a).join("corpus")).unwrap());

    let (r, _) = go(&["gen-data", "--config", &cfg, "--out", &a, "--seed", "4", "--force"]);
    r.unwrap();
    assert_ne!(ha, manifest_hash(&Path::new(&a).join("corpus")).unwrap());
}

#[test]
fn single_task_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("inpaint.toml");
    std::fs::write(&cfg, TINY.replace("[corpus]\n", "[corpus]\nmixture = [1.0, 0.0, 0.0, 0.0, 0.0]\n")).unwrap();
    let cfg = cfg.display().to_string();
    let out = dir.path().display().to_string();
    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    let counts = task_counts(&read_manifest(&dir.path().join("corpus")).unwrap());
    assert_eq!(counts.keys().copied().collect::<Vec<_>>(), vec![TaskKind::Inpaint]);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    std::fs::write(&cfg, "[train]\nstpes = 3\n").unwrap();
    let (r, _) = go(&["train", "--dry-run", "--config", cfg.to_str().unwrap()]);
    let msg = r.unwrap_err().to_string();
    assert!(msg.contains("stpes"), "{msg}");
}

#[test]
fn train_dry_run_reports_parameters_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let log = ok(&["train", "--dry-run", "--out", &out]);
    assert!(log.contains("parameters: 1935456"), "{log}");
    assert!(!dir.path().join("train").exists());
}

#[test]
fn train_rejects_a_corpus_of_another_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().display().to_string();
    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("[corpus]\n", "[corpus]\nframes = 8\n")).unwrap();
    let (r, _) = go(&["train", "--config", other.to_str().unwrap(), "--out", &out]);
    assert!(matches!(r, Err(Error::Validation(_))), "{r:?}");
    assert!(!dir.path().join("train").join("ckpt-000002").exists());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let corpus = dir.path().join("data");
    let with_corpus = |name: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, format!("{TINY}\n[data]\ncorpus_dir = {:?}\n", corpus.display().to_string())).unwrap();
        p.display().to_string()
    };
    ok(&["gen-data", "--config", &cfg, "--out", dir.path().join("data-root").to_str().unwrap()]);
    std::fs::rename(dir.path().join("data-root").join("corpus"), &corpus).unwrap();
    let c = with_corpus("c.toml");
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    ok(&["train", "--config", &c, "--out", full.to_str().unwrap()]);
    ok(&["train", "--config", &c, "--out", split.to_str().unwrap(), "--steps", "2"]);
    let log = ok(&["train", "--config", &c, "--out", split.to_str().unwrap()]);
    assert!(log.contains("from step 2"), "{log}");
    let a = read_loss_log(&full.join("train").join("loss.jsonl")).unwrap();
    let b = read_loss_log(&split.join("train").join("loss.jsonl")).unwrap();
    let losses = |v: &[vidfuse::train::StepRecord]| v.iter().map(|r| (r.step, r.loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(losses(&a)[2..], losses(&b)[2..]);
    let wa = std::fs::read(full.join("train").join("ckpt-000004").join("model.safetensors")).unwrap();
    let wb = std::fs::read(split.join("train").join("ckpt-000004").join("model.safetensors")).unwrap();
    assert!(wa == wb, "final weights differ");
}

/// Corpus plus a 4-step checkpoint under `dir`; returns the config path.
fn trained(dir: &Path, extra: &str) -> String {
    let cfg = write_config(dir, extra);
    let out = dir.display().to_string();
    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    ok(&["train", "--config", &cfg, "--out", &out]);
    cfg
}

#[test]
fn sample_eval_and_their_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path(), "");
    let out = dir.path().display().to_string();

    let (r, _) = go(&["sample", "--config", &cfg, "--out", &out, "missing-id"]);
    let msg = r.unwrap_err().to_string();
    assert!(msg.contains("eval-0000") && msg.contains("eval-0002"), "{msg}");

    ok(&["sample", "--config", &cfg, "--out", &out, "eval-0001"]);
    let first = read_clip(&dir.path().join("samples").join("eval-0001.vft")).unwrap();
    assert!(dir.path().join("samples").join("eval-0001.png").exists());
    assert!(dir.path().join("samples").join(RESOLVED_CONFIG).exists());
    ok(&["sample", "--config", &cfg, "--out", &out, "eval-0001", "--force"]);
    let again = read_clip(&dir.path().join("samples").join("eval-0001.vft")).unwrap();
    assert_eq!(first.data, again.data);

    ok(&["sample", "--config", &cfg, "--out", &out, "eval-0001", "--force", "--unconditional"]);
    let uncond = read_clip(&dir.path().join("samples").join("eval-0001.vft")).unwrap();
    assert!(uncond.same_shape(&first) && uncond.data.iter().all(|v| v.is_finite()));
    let index = std::fs::read_to_string(dir.path().join("samples").join("samples.jsonl")).unwrap();
    assert!(index.contains("\"sampler_seed\":3") && index.contains("\"unconditional\":true"), "{index}");

    let (r, _) = go(&["eval", "--config", &cfg, "--out", &out]);
    let o = r.unwrap();
    assert!(o.threshold_failures.is_empty());
    let report = std::fs::read_to_string(dir.path().join("eval").join("eval").join("report.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for l in &lines[..3] {
        for k in ["temporal_consistency", "dynamic_degree", "region_psnr", "object_similarity", "pose_error"] {
            assert!(l.get(k).is_some(), "{k} missing from {l}");
        }
    }
    assert!(lines[3].get("aggregate").is_some());
}

#[test]
fn thresholds_gate_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path(), "");
    let out = dir.path().display().to_string();
    let exe = env!("CARGO_BIN_EXE_vidfuse");
    let status = Proc::new(exe).args(["eval", "--config", &cfg, "--out", &out]).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let gated = dir.path().join("gated.toml");
    std::fs::write(&gated, format!("{TINY}\n[thresholds]\nregion_psnr_min = 25.0\n")).unwrap();
    let status = Proc::new(exe).args(["eval", "--force", "--config", gated.to_str().unwrap(), "--out", &out]).status().unwrap();
    assert_eq!(status.code(), Some(EXIT_THRESHOLD));
    let status = Proc::new(exe).args(["sample", "--out", &out, "--config", &cfg, "no-such-id"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let root = dir.path().join("from-env");
    let status = Proc::new(env!("CARGO_BIN_EXE_vidfuse"))
        .args(["gen-data", "--config", &cfg])
        .env("VIDFUSE_OUT", &root)
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(root.join("corpus").join("manifest.jsonl").exists());
}

#[test]
fn ablate_emits_a_report_per_arm_and_a_delta_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().display().to_string();
    ok(&["gen-data", "--config", &cfg, "--out", &out]);

    let (r, _) = go(&["ablate", "--config", &cfg, "--out", &out, "--suite", "posenet_variants", "--eval-only"]);
    assert!(matches!(r, Err(Error::NotFound(_))), "{r:?}");

    let log = ok(&["ablate", "--config", &cfg, "--out", &out, "--suite", "posenet_variants"]);
    let suite = dir.path().join("ablate").join("posenet_variants");
    for arm in ["fusion", "token_add", "controlnet"] {
        assert!(suite.join(arm).join("report.jsonl").exists(), "{arm}");
    }
    let summary = std::fs::read_to_string(suite.join("summary.txt")).unwrap();
    assert!(summary.contains("delta token_add vs fusion") && summary.contains("delta controlnet vs fusion"), "{summary}");
    assert!(log.contains("evaluating arm controlnet"));

    // a second run reuses the checkpoints
    let log = ok(&["ablate", "--config", &cfg, "--out", &out, "--suite", "posenet_variants", "--eval-only"]);
    assert!(!log.contains("training arm"), "{log}");
}

#[test]
fn micro_sampling_is_fast() {
    use candle_core::{DType, Device};
    use vidfuse::codec::{CodecConfig, LatentCodec};
    use vidfuse::eval::generate;
    use vidfuse::flow::SamplerConfig;
    use vidfuse::model::{EditModel, ModelConfig};
    use vidfuse::synth::{overfit_set, CorpusConfig};

    let model = EditModel::new(ModelConfig::default(), DType::F32, &Device::Cpu).unwrap();
    let codec = LatentCodec::new(CodecConfig::default()).unwrap();
    let sample = &overfit_set(&CorpusConfig::default()).unwrap()[4];
    let t0 = Instant::now();
    generate(&model, &codec, sample, &SamplerConfig { steps: 10, seed: 0 }).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 5.0, "{secs:.2}s");
}
