//! End-to-end acceptance checks. Each test writes one `criterion N PASS|FAIL`
//! line straight to stderr, so the lines show even when output is captured.
//!
//! Criteria 6 to 8 share one 2000-step overfit run; criterion 9 trains five
//! small ablation arms. Expect the file to take tens of minutes on one core.

use std::collections::HashSet;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidfuse::ablation::{run_ablation, suite_arms, ArmMode, Suite};
use vidfuse::backbone::InjectionVariant;
use vidfuse::codec::{CodecConfig, LatentCodec, LATENT_CHANNELS};
use vidfuse::eval::{evaluate, pose_swap, EvalConfig, EvalReport, ReportMeta};
use vidfuse::flow::{euler_integrate, mse, randn, FlowSample, LogitNormal};
use vidfuse::fusion::{route, DropoutPolicy, Presence};
use vidfuse::metrics::{dynamic_degree, psnr_from_mse, region_psnr, temporal_consistency, PatchColorEmbedder, Region};
use vidfuse::model::{EditModel, LatentConditions, ModelConfig};
use vidfuse::optim::OptimConfig;
use vidfuse::params::ParamStore;
use vidfuse::rope::{apply_rotary, reference_indices, video_indices, RopeAllocation, RopeIndex};
use vidfuse::synth::{overfit_set, CorpusConfig, TaskKind, TaskSample};
use vidfuse::text::{build_prompt, PromptTriple};
use vidfuse::tokenizers::{build_fusion_tokenizer, Patch, VideoTokenizer};
use vidfuse::train::{flow_loss, probe_loss, TrainConfig, TrainItem, Trainer, PROBE_TIMESTEPS};
use vidfuse::video::{Image, MaskVideo, VideoClip};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn codec() -> LatentCodec {
    LatentCodec::new(CodecConfig::default()).unwrap()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[test]
fn c01_tokenizer_inheritance() {
    let start = Instant::now();
    let device = Device::Cpu;
    let mut ps = ParamStore::new(7, DType::F32, device.clone());
    let k1 = VideoTokenizer::new(&mut ps, "k1", LATENT_CHANNELS, Patch::default(), 128).unwrap();
    let k2 = build_fusion_tokenizer(&k1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0f32;
    for _ in 0..1000 {
        let x = randn(&[4, 8, 8, LATENT_CHANNELS], &mut rng, DType::F32, &device).unwrap();
        let padded = Tensor::cat(&[&x, &x.zeros_like().unwrap()], 3).unwrap();
        let d = (k2.tokenize(&padded).unwrap() - k1.tokenize(&x).unwrap()).unwrap();
        worst = worst.max(d.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    report(1, "tokenizer inheritance", worst <= 1e-6 && secs < 10.0, &format!("max |K2([x;0]) - K1(x)| {worst:e} over 1000 latents in {secs:.1}s"));
}

#[test]
fn c02_rope_relative_shift_and_disjointness() {
    let start = Instant::now();
    let alloc = RopeAllocation::for_head_dim(32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..100 {
        let q: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut idx = || RopeIndex::new(rng.random_range(-20..20), rng.random_range(-20..20), rng.random_range(-20..20));
        let (a, b) = (idx(), idx());
        let delta = rng.random_range(-50..50);
        let score = |a: RopeIndex, b: RopeIndex| {
            dot(&apply_rotary(&[q.clone()], &[a], &alloc).unwrap()[0], &apply_rotary(&[k.clone()], &[b], &alloc).unwrap()[0])
        };
        worst = worst.max((score(a, b) - score(a.offset(delta), b.offset(delta))).abs());
    }
    let mut collisions = 0;
    for t in 1..=8 {
        for h in 1..=16 {
            for w in 1..=16 {
                let video: HashSet<RopeIndex> = video_indices(t, h, w).unwrap().into_iter().collect();
                collisions += reference_indices(h, w, true).unwrap().iter().filter(|r| video.contains(r)).count();
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "rope relative shift",
        worst <= 1e-4 && collisions == 0 && secs < 30.0,
        &format!("max score change {worst:e} over 100 trials; {collisions} collisions up to (8,16,16); {secs:.1}s"),
    );
}

/// Every condition stream present, built from a mask-edit and a pose-driven sample.
fn full_conditions(codec: &LatentCodec, set: &[TaskSample]) -> LatentConditions {
    let edit = set.iter().find(|s| s.task == TaskKind::MaskEdit).unwrap();
    let pose = set.iter().find(|s| s.task == TaskKind::PoseDrive).unwrap();
    let a = LatentConditions::encode(codec, &edit.conditions().unwrap(), Some(&edit.prompt), DType::F32, &Device::Cpu).unwrap();
    let b = LatentConditions::encode(codec, &pose.conditions().unwrap(), Some(&pose.prompt), DType::F32, &Device::Cpu).unwrap();
    let c = LatentConditions { masked_source: a.masked_source, mask: a.mask, ..b };
    assert_eq!(c.presence(), Presence { mask: true, pose: true, reference: true, text: true });
    c
}

#[test]
fn c03_safe_start() {
    let start = Instant::now();
    let codec = codec();
    let cond = full_conditions(&codec, &overfit_set(&CorpusConfig::default()).unwrap());
    let z = randn(&[4, 8, 8, LATENT_CHANNELS], &mut ChaCha8Rng::seed_from_u64(4), DType::F32, &Device::Cpu).unwrap();
    let diff = |v: InjectionVariant| {
        let m = EditModel::new(ModelConfig { injection: v, ..Default::default() }, DType::F32, &Device::Cpu).unwrap();
        let a = m.forward(&z, 0.5, &cond).unwrap().velocity;
        let b = m.forward(&z, 0.5, &LatentConditions::default()).unwrap().velocity;
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    };
    let (fusion, controlnet, token_add) = (diff(InjectionVariant::Fusion), diff(InjectionVariant::Controlnet), diff(InjectionVariant::TokenAdd));
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "safe start",
        fusion <= 1e-6 && controlnet == 0.0 && token_add > 1e-3 && secs < 60.0,
        &format!("max |present - absent|: fusion {fusion:e}, controlnet {controlnet:e}, token_add {token_add:e}; {secs:.1}s"),
    );
}

#[test]
fn c04_gradient_check() {
    let start = Instant::now();
    let d = Device::Cpu;
    let cfg = ModelConfig { dim: 32, heads: 2, text_dim: 32, dual_blocks: 1, single_blocks: 1, text_blocks: 1, ..Default::default() };
    let model = EditModel::new(cfg, DType::F64, &d).unwrap();
    // Zero-initialized gates and adapters would make most gradients trivially zero.
    model.params.perturb_all(11, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut lat = |t| randn(&[t, 8, 8, 16], &mut rng, DType::F64, &d).unwrap();
    let cond = LatentConditions {
        masked_source: Some(lat(4)),
        mask: Some(lat(4)),
        pose: Some(lat(4)),
        references: vec![lat(1)],
        prompt: Some(build_prompt(&PromptTriple::new("swap the ball", "a red ball on gray", true)).unwrap()),
        prompt_image: Some(Image::filled(64, 64, [0.8, 0.2, 0.1])),
    };
    let fs = FlowSample::new(lat(4), lat(4), 0.37).unwrap();
    let loss = |m: &EditModel| flow_loss(m, &fs.z1, &cond, &fs).unwrap();
    let grads = loss(&model).backward().unwrap();
    let vars = model.params.trainable_vars();
    let (eps, floor) = (1e-4, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut above) = (0f64, 0);
    for _ in 0..50 {
        let (_, var) = vars.choose(&mut rng).unwrap();
        let k = rng.random_range(0..var.elem_count());
        let analytic = grads.get(var.as_tensor()).map_or(0.0, |g| g.flatten_all().unwrap().get(k).unwrap().to_scalar::<f64>().unwrap());
        let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |v: f64| {
            let mut w = orig.clone();
            w[k] = v;
            var.set(&Tensor::from_vec(w, var.dims(), &d).unwrap()).unwrap();
            loss(&model).to_scalar::<f64>().unwrap()
        };
        let numeric = (at(orig[k] + eps) - at(orig[k] - eps)) / (2.0 * eps);
        at(orig[k]);
        let scale = analytic.abs().max(numeric.abs());
        above += usize::from(scale >= floor);
        worst = worst.max((analytic - numeric).abs() / scale.max(floor));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        "gradient check",
        worst <= 1e-3 && above >= 25 && secs < 300.0,
        &format!("worst relative error {worst:e} over 50 entries ({above} above {floor:e}); {secs:.1}s"),
    );
}

#[test]
fn c05_flow_matching_contracts() {
    let d = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0 = randn(&[2, 3, 4], &mut rng, DType::F64, &d).unwrap();
    let z1 = randn(&[2, 3, 4], &mut rng, DType::F64, &d).unwrap();
    let targets: Vec<Vec<f64>> =
        [0.0, 0.3, 0.77, 1.0].iter().map(|&t| FlowSample::new(z0.clone(), z1.clone(), t).unwrap().u_t.flatten_all().unwrap().to_vec1().unwrap()).collect();
    let u_const = targets.windows(2).all(|w| w[0] == w[1]);
    let u = FlowSample::new(z0.clone(), z1.clone(), 0.5).unwrap().u_t;
    let zero_loss = mse(&u, &u).unwrap().to_scalar::<f64>().unwrap();
    let c = randn(&[2, 3, 4], &mut rng, DType::F64, &d).unwrap();
    let one_step = euler_integrate(&z0, 1, |_, _| Ok(c.clone())).unwrap();
    let euler_err = (one_step - (&z0 + &c).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    let sched = LogitNormal::default();
    let mut draws: Vec<f64> = (0..100_000).map(|_| sched.sample(&mut rng).unwrap()).collect();
    draws.sort_by(f64::total_cmp);
    let median = draws[draws.len() / 2];
    report(
        5,
        "flow matching contracts",
        u_const && zero_loss == 0.0 && euler_err == 0.0 && (0.49..=0.51).contains(&median),
        &format!("u_t constant {u_const}; loss at v = u_t {zero_loss}; one-step Euler error {euler_err}; logit-normal median {median:.4}"),
    );
}

struct Overfit {
    set: Vec<TaskSample>,
    probe: (f64, f64),
    wall: Duration,
    initial: EditModel,
    trained: EditModel,
}

/// Memorizing eight clips tolerates a higher rate than the corpus default.
const OVERFIT_LR: f64 = 1e-3;

/// Micro model trained for 2000 steps on the eight-clip set, shared by criteria 6 to 8.
fn overfit() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let device = Device::Cpu;
        let set = overfit_set(&CorpusConfig::default()).unwrap();
        let items = TrainItem::from_samples(&codec(), &set, DType::F32, &device).unwrap();
        let cfg = TrainConfig {
            steps: 2000,
            optim: OptimConfig { lr: OVERFIT_LR, warmup_steps: 50, ..Default::default() },
            dropout: DropoutPolicy::OFF,
            checkpoint_every: 0,
            ..Default::default()
        };
        let mut trainer = Trainer::new(ModelConfig::default(), cfg, &device).unwrap();
        let initial = EditModel::new(ModelConfig::default(), DType::F32, &device).unwrap();
        let before = probe_loss(&trainer.model, &items, 0, &PROBE_TIMESTEPS).unwrap();
        let start = Instant::now();
        trainer.run(&items, None, |_| {}).unwrap();
        let wall = start.elapsed();
        let after = probe_loss(&trainer.model, &items, 0, &PROBE_TIMESTEPS).unwrap();
        Overfit { set, probe: (before, after), wall, initial, trained: trainer.model }
    })
}

fn eval_report(model: &EditModel, set: &[TaskSample], label: &str) -> EvalReport {
    let cfg = EvalConfig::default();
    let meta = ReportMeta { label: label.into(), checkpoint: None, config_hash: String::new(), sampler_seed: cfg.sampler.seed };
    evaluate(model, &codec(), set, &cfg, meta, |_, _| Ok(())).unwrap()
}

#[test]
fn c06_overfit_loss() {
    let run = overfit();
    let (before, after) = run.probe;
    let ratio = after / before;
    let mins = run.wall.as_secs_f64() / 60.0;
    report(
        6,
        "overfit loss",
        ratio <= 0.10 && mins <= 30.0,
        &format!("probe loss {before:.4} -> {after:.4} ({:.1}% of step 0) in {mins:.1} min", 100.0 * ratio),
    );
}

#[test]
fn c07_editing_fidelity() {
    let run = overfit();
    let edits: Vec<TaskSample> = run.set.iter().filter(|s| matches!(s.task, TaskKind::Inpaint | TaskKind::MaskEdit)).cloned().collect();
    let rep = eval_report(&run.trained, &edits, "trained");
    let psnr: Vec<f64> = rep.samples.iter().map(|s| s.region_psnr.unwrap()).collect();
    let inside: Vec<f64> = rep.samples.iter().map(|s| s.dynamic_degree_inside.unwrap()).collect();
    let pass = psnr.iter().all(|&p| p >= 25.0) && inside.iter().all(|&d| d > 0.0);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    report(7, "editing fidelity", pass, &format!("outside-mask PSNR [{}] dB; inside dynamic degree [{}]", fmt(&psnr), fmt(&inside)));
}

#[test]
fn c08_pose_control() {
    let run = overfit();
    let poses: Vec<TaskSample> = run.set.iter().filter(|s| s.task == TaskKind::PoseDrive).cloned().collect();
    let pen = |r: &EvalReport| {
        let v: Vec<f64> = r.samples.iter().map(|s| s.pose_error_penalized.unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (before, after) = (pen(&eval_report(&run.initial, &poses, "initial")), pen(&eval_report(&run.trained, &poses, "trained")));
    let cfg = EvalConfig::default();
    let swaps: Vec<_> = (0..poses.len())
        .map(|i| pose_swap(&run.trained, &codec(), &poses[i], &poses[(i + 1) % poses.len()], &cfg.sampler, cfg.sampler.seed + 1).unwrap())
        .collect();
    let mean = |f: fn(&vidfuse::eval::PoseSwap) -> f64| swaps.iter().map(f).sum::<f64>() / swaps.len() as f64;
    let ratio = mean(|s| s.swap) / mean(|s| s.reseed);
    let drop = 1.0 - after / before;
    report(
        8,
        "pose control",
        drop >= 0.5 && ratio >= 5.0,
        &format!(
            "penalized pose error {before:.2} -> {after:.2} px ({:.0}% drop); pose-swap L2 / reseed L2 {ratio:.2} (per pair [{}])",
            100.0 * drop,
            swaps.iter().map(|s| format!("{:.1}", s.ratio())).collect::<Vec<_>>().join(" ")
        ),
    );
}

/// Step budget of every ablation arm.
const ABLATION_STEPS: usize = 1000;

#[test]
fn c09_ablation_deltas() {
    // One figure, reference and prompt under four motions: only the pose stream tells the clips apart.
    let samples: Vec<TaskSample> = overfit_set(&CorpusConfig::default()).unwrap().into_iter().filter(|s| s.task == TaskKind::PoseDrive).collect();
    let codec = codec();
    let items = TrainItem::from_samples(&codec, &samples, DType::F32, &Device::Cpu).unwrap();
    let train = TrainConfig {
        steps: ABLATION_STEPS,
        optim: OptimConfig { lr: OVERFIT_LR, warmup_steps: 50, ..Default::default() },
        dropout: DropoutPolicy::OFF,
        checkpoint_every: 0,
        ..Default::default()
    };
    let root = tempfile::tempdir().unwrap();
    let run = |suite: Suite| {
        let arms = suite_arms(suite, &ModelConfig::default(), &train, &EvalConfig::default()).unwrap();
        run_ablation(suite, &arms, &items, &samples, &codec, root.path(), ArmMode::TrainMissing, |_| {}).unwrap()
    };
    let pose = run(Suite::PosenetVariants);
    let pe = |arm: &str| pose.arm(arm).unwrap().metric("pose_error_penalized").unwrap();
    let (fusion, token_add, controlnet) = (pe("fusion"), pe("token_add"), pe("controlnet"));
    let shift = run(Suite::RopeShift);
    let cp = |arm: &str| shift.arm(arm).unwrap().metric("copy_paste").unwrap();
    let (with, without) = (cp("with_shift"), cp("without_shift"));
    report(
        9,
        "ablation deltas",
        fusion < token_add && fusion < controlnet && without > with,
        &format!(
            "{ABLATION_STEPS} steps per arm; penalized pose error fusion {fusion:.2}, token_add {token_add:.2}, controlnet {controlnet:.2}; copy-paste with shift {with:.4}, without {without:.4}"
        ),
    );
}

#[test]
fn c10_condition_routing() {
    let policy = DropoutPolicy::default();
    let all = Presence { mask: true, pose: true, reference: true, text: true };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 10_000;
    let (mut dropped, mut empty) = ([0usize; 4], 0);
    for _ in 0..n {
        let p = route(all, &mut rng, &policy).unwrap();
        empty += usize::from(!p.any());
        for (d, on) in dropped.iter_mut().zip([p.mask, p.pose, p.reference, p.text]) {
            *d += usize::from(!on);
        }
    }
    let want = [policy.p_mask, policy.p_pose, policy.p_reference, policy.p_text];
    let freq: Vec<f64> = dropped.iter().map(|&d| d as f64 / n as f64).collect();
    let worst = freq.iter().zip(want).map(|(f, p)| (f - p).abs()).fold(0.0, f64::max);
    report(
        10,
        "condition routing",
        worst <= 0.02 && empty == 0,
        &format!("drop rates {freq:?} vs {want:?} (max deviation {worst:.4}); {empty} all-absent draws"),
    );
}

#[test]
fn c11_metric_sanity() {
    let still = VideoClip::filled(8, 32, 32, [0.3, 0.6, 0.2]);
    let tc = temporal_consistency(&still, &PatchColorEmbedder::default()).unwrap();
    let dd = dynamic_degree(&still).unwrap();
    // Uniform noise of amplitude a has MSE a^2 / 3.
    let a = 0.1f32;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clean = VideoClip::filled(8, 32, 32, [0.5; 3]);
    let mut noisy = clean.clone();
    for v in noisy.data.iter_mut() {
        *v += a * (2.0 * rng.random::<f32>() - 1.0);
    }
    let got = region_psnr(&noisy, &clean, &MaskVideo::empty(8, 32, 32), Region::Outside).unwrap();
    let want = psnr_from_mse((a * a) as f64 / 3.0);
    report(
        11,
        "metric sanity",
        tc == 1.0 && dd == 0.0 && (got - want).abs() <= 0.1,
        &format!("static clip consistency {tc}, dynamic degree {dd}; noise PSNR {got:.3} vs closed form {want:.3} dB"),
    );
}
