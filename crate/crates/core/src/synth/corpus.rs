//! Deterministic corpus generation, manifest records and on-disk layout.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::name_hash;
use crate::synth::pose::Joints;
use crate::synth::scene::random_scene;
use crate::synth::tasks::{
    build_addition, build_inpaint, build_mask_edit, build_outpaint, build_pose_drive, figure_scene, random_figure,
    random_motion, random_replacement, TaskKind, TaskSample,
};
use crate::tensor_io::{read_clip, write_clip};
use crate::text::PromptTriple;
use crate::video::{Image, MaskVideo, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train: usize,
    pub eval: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Weights of inpaint, outpaint, mask_edit, addition, pose_drive.
    pub mixture: [f64; 5],
    pub seed: u64,
    pub max_expand: usize,
    pub min_crop: f64,
    pub augment_pose: bool,
    /// Also dump PNG frames for inspection.
    pub png: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 256,
            eval: 32,
            frames: 16,
            height: 64,
            width: 64,
            mixture: [0.2; 5],
            seed: 0,
            max_expand: 4,
            min_crop: 0.5,
            augment_pose: true,
            png: false,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixture.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("mixture weights must be finite and non-negative"));
        }
        let sum: f64 = self.mixture.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("mixture weights sum to {sum}, expected 1")));
        }
        if self.frames == 0 || self.height < 16 || self.width < 16 {
            return Err(Error::config("corpus clips need frames and at least 16x16 pixels"));
        }
        if !(0.0..=1.0).contains(&self.min_crop) {
            return Err(Error::config("min_crop outside [0, 1]"));
        }
        Ok(())
    }

    pub fn sample_seed(&self, split: &str, index: usize) -> u64 {
        self.seed ^ name_hash(&format!("{split}/{index}"))
    }
}

/// Build one sample of `task` from a sample seed.
pub fn build_task(cfg: &CorpusConfig, task: TaskKind, seed: u64) -> Result<TaskSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, f) = (cfg.height, cfg.width, cfg.frames);
    match task {
        TaskKind::Inpaint => {
            let n = rng.random_range(2..=3);
            build_inpaint(&random_scene(&mut rng, h, w, f, n, seed)?, &mut rng, cfg.max_expand)
        }
        TaskKind::Outpaint => {
            let n = rng.random_range(1..=3);
            build_outpaint(&random_scene(&mut rng, h, w, f, n, seed)?, &mut rng, cfg.min_crop)
        }
        TaskKind::MaskEdit => {
            let n = rng.random_range(1..=3);
            let spec = random_scene(&mut rng, h, w, f, n, seed)?;
            let k = rng.random_range(0..n);
            let plan = random_replacement(&mut rng, &spec, k)?;
            build_mask_edit(&plan, &mut rng, cfg.max_expand)
        }
        TaskKind::Addition => {
            let n = rng.random_range(2..=3);
            build_addition(&random_scene(&mut rng, h, w, f, n, seed)?, &mut rng)
        }
        TaskKind::PoseDrive => {
            let fig = random_figure(&mut rng, h, w);
            build_pose_drive(&figure_scene(h, w, f, fig, seed), &mut rng, cfg.augment_pose)
        }
    }
}

fn choose_task(mixture: &[f64; 5], u: f64) -> TaskKind {
    let mut acc = 0.0;
    for (k, &w) in mixture.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            return TaskKind::ALL[k];
        }
    }
    // rounding slack: last task with positive weight
    let k = mixture.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    TaskKind::ALL[k]
}

pub fn generate_split(cfg: &CorpusConfig, split: &str, count: usize) -> Result<Vec<TaskSample>> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let seed = cfg.sample_seed(split, i);
            let u = ChaCha8Rng::seed_from_u64(seed ^ 0x7461736b).random::<f64>();
            let mut s = build_task(cfg, choose_task(&cfg.mixture, u), seed)?;
            s.id = format!("{split}-{i:04}");
            Ok(s)
        })
        .collect()
}

/// The fixed eight-sample overfit set: two inpaint and two mask-edit samples
/// on two-shape scenes, and four pose-driven samples that share figure,
/// reference and prompt and differ only in motion.
pub fn overfit_set(cfg: &CorpusConfig) -> Result<Vec<TaskSample>> {
    let (h, w, f) = (cfg.height, cfg.width, cfg.frames);
    let mut out = Vec::with_capacity(8);
    for i in 0..2 {
        let seed = cfg.sample_seed("overfit-inpaint", i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = build_inpaint(&random_scene(&mut rng, h, w, f, 2, seed)?, &mut rng, cfg.max_expand)?;
        s.id = format!("overfit-inpaint-{i}");
        out.push(s);
    }
    let mut i = 0;
    let mut attempt = 0;
    while i < 2 {
        let seed = cfg.sample_seed("overfit-edit", attempt);
        attempt += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_scene(&mut rng, h, w, f, 2, seed)?;
        let k = rng.random_range(0..2);
        let mut s = build_mask_edit(&random_replacement(&mut rng, &spec, k)?, &mut rng, cfg.max_expand)?;
        // keep edits whose replacement moves, so the edited region has motion
        if !has_motion(&s.target, s.mask.as_ref().expect("mask")) {
            continue;
        }
        s.id = format!("overfit-edit-{i}");
        out.push(s);
        i += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed("overfit-pose", 0));
    let mut figure = random_figure(&mut rng, h, w);
    for i in 0..4 {
        figure.motion = Some(random_motion(&mut rng));
        let spec = figure_scene(h, w, f, figure.clone(), cfg.seed);
        let mut s = build_pose_drive(&spec, &mut rng, false)?;
        s.id = format!("overfit-pose-{i}");
        out.push(s);
    }
    Ok(out)
}

fn has_motion(clip: &VideoClip, mask: &MaskVideo) -> bool {
    (1..clip.frames).any(|t| {
        (0..clip.height).any(|y| (0..clip.width).any(|x| mask.get(t, y, x) && clip.get(t, y, x) != clip.get(t - 1, y, x)))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub task: TaskKind,
    pub seed: u64,
    /// Stream name -> path relative to the corpus root.
    pub files: BTreeMap<String, String>,
    pub instruction: String,
    pub prompt: String,
    pub image_slot: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<Vec<Joints>>,
    pub meta: serde_json::Value,
}

impl ManifestRecord {
    pub fn prompt_triple(&self) -> PromptTriple {
        PromptTriple::new(self.instruction.clone(), self.prompt.clone(), self.image_slot)
    }
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Write samples under `root/clips` and append their records to the manifest.
pub fn write_samples(root: &Path, split: &str, samples: &[TaskSample], png: bool) -> Result<Vec<ManifestRecord>> {
    let clips = root.join("clips");
    std::fs::create_dir_all(&clips)?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let mut files = BTreeMap::new();
        let mut put = |name: &str, clip: &VideoClip| -> Result<()> {
            let rel = format!("clips/{}_{name}.vft", s.id);
            write_clip(&root.join(&rel), clip)?;
            if png {
                crate::frames::write_frame_grid(&root.join(format!("clips/{}_{name}.png", s.id)), clip)?;
            }
            files.insert(name.to_string(), rel);
            Ok(())
        };
        put("source", &s.source)?;
        put("target", &s.target)?;
        if let Some(c) = &s.masked_source {
            put("masked_source", c)?;
        }
        if let Some(m) = &s.mask {
            put("mask", &m.to_clip())?;
        }
        if let Some(p) = &s.pose {
            put("pose", p)?;
        }
        for (i, r) in s.references.iter().enumerate() {
            put(&format!("reference{i}"), &VideoClip::repeat_image(r, 1))?;
        }
        records.push(ManifestRecord {
            id: s.id.clone(),
            split: split.to_string(),
            task: s.task,
            seed: s.seed,
            files,
            instruction: s.prompt.instruction.clone(),
            prompt: s.prompt.text_prompt.clone(),
            image_slot: s.prompt.image_slot,
            joints: s.joints.clone(),
            meta: s.meta.clone(),
        });
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(root.join(MANIFEST))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(records)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join(MANIFEST);
    let f = std::fs::File::open(&path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// SHA-256 of the manifest file.
pub fn manifest_hash(root: &Path) -> Result<String> {
    let bytes = std::fs::read(root.join(MANIFEST))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn mask_from_clip(clip: &VideoClip) -> MaskVideo {
    let mut m = MaskVideo::empty(clip.frames, clip.height, clip.width);
    for t in 0..clip.frames {
        for y in 0..clip.height {
            for x in 0..clip.width {
                if clip.get(t, y, x)[0] > 0.5 {
                    m.set(t, y, x, true);
                }
            }
        }
    }
    m
}

/// Rebuild a sample from its record.
pub fn load_sample(root: &Path, rec: &ManifestRecord) -> Result<TaskSample> {
    let get = |name: &str| -> Result<Option<VideoClip>> {
        match rec.files.get(name) {
            Some(rel) => Ok(Some(read_clip(&root.join(rel))?)),
            None => Ok(None),
        }
    };
    let missing = |name: &str| Error::NotFound(format!("sample {} has no {name} file", rec.id));
    let mut references: Vec<Image> = Vec::new();
    for i in 0.. {
        match get(&format!("reference{i}"))? {
            Some(c) => references.push(c.frame(0)),
            None => break,
        }
    }
    Ok(TaskSample {
        id: rec.id.clone(),
        task: rec.task,
        seed: rec.seed,
        source: get("source")?.ok_or_else(|| missing("source"))?,
        masked_source: get("masked_source")?,
        mask: get("mask")?.map(|c| mask_from_clip(&c)),
        pose: get("pose")?,
        joints: rec.joints.clone(),
        references,
        prompt: rec.prompt_triple(),
        target: get("target")?.ok_or_else(|| missing("target"))?,
        meta: rec.meta.clone(),
    })
}

/// Per-task sample counts.
pub fn task_counts(records: &[ManifestRecord]) -> BTreeMap<TaskKind, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.task).or_insert(0) += 1;
    }
    m
}

pub fn corpus_paths(root: &Path) -> (PathBuf, PathBuf) {
    (root.join(MANIFEST), root.join("clips"))
}
