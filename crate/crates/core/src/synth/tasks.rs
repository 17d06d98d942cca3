//! Editing-task constructors over procedural scenes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::fusion::ConditionSet;
use crate::synth::pose::{render_pose, FigureMotion, Joints};
use crate::synth::scene::{
    canonical_crop, color_name, dilate_mask, gen_clip, SceneSpec, Shape, ShapeKind, Trajectory, MASK_FILL, PALETTE,
};
use crate::text::PromptTriple;
use crate::video::{Image, MaskVideo, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Inpaint,
    Outpaint,
    MaskEdit,
    Addition,
    PoseDrive,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [TaskKind::Inpaint, TaskKind::Outpaint, TaskKind::MaskEdit, TaskKind::Addition, TaskKind::PoseDrive];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Inpaint => "inpaint",
            TaskKind::Outpaint => "outpaint",
            TaskKind::MaskEdit => "mask_edit",
            TaskKind::Addition => "addition",
            TaskKind::PoseDrive => "pose_drive",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct TaskSample {
    pub id: String,
    pub task: TaskKind,
    pub seed: u64,
    pub source: VideoClip,
    pub masked_source: Option<VideoClip>,
    pub mask: Option<MaskVideo>,
    pub pose: Option<VideoClip>,
    /// Conditioning joints of `pose`, one entry per frame.
    pub joints: Option<Vec<Joints>>,
    pub references: Vec<Image>,
    pub prompt: PromptTriple,
    pub target: VideoClip,
    pub meta: serde_json::Value,
}

impl TaskSample {
    pub fn conditions(&self) -> Result<ConditionSet> {
        ConditionSet::new(
            self.references.clone(),
            self.masked_source.clone(),
            self.mask.as_ref().map(MaskVideo::to_clip),
            self.pose.clone(),
            true,
        )
    }
}

/// Source with the masked pixels replaced by mid-gray.
pub fn apply_mask(source: &VideoClip, mask: &MaskVideo) -> Result<VideoClip> {
    if (mask.frames, mask.height, mask.width) != (source.frames, source.height, source.width) {
        return Err(Error::shape("mask and source clip differ in shape"));
    }
    let mut out = source.clone();
    for t in 0..source.frames {
        for y in 0..source.height {
            for x in 0..source.width {
                if mask.get(t, y, x) {
                    out.set(t, y, x, MASK_FILL);
                }
            }
        }
    }
    Ok(out)
}

fn scene_prompt(spec: &SceneSpec) -> String {
    let names: Vec<String> = spec.shapes.iter().map(Shape::describe).collect();
    if names.is_empty() {
        "an empty dark background".into()
    } else {
        format!("a {} moving on a dark background", names.join(" and a "))
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, n: usize, what: &str) -> Result<usize> {
    if n == 0 {
        return Err(Error::Spec(format!("{what}: scene has no shapes")));
    }
    Ok(rng.random_range(0..n))
}

/// Object removal: the masked shape disappears from the target.
pub fn build_inpaint<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R, max_expand: usize) -> Result<TaskSample> {
    let k = pick(rng, spec.shapes.len(), "inpaint")?;
    let (source, gt) = gen_clip(spec)?;
    let (target, _) = gen_clip(&spec.without(k))?;
    let (mask, expand) = dilate_mask(&gt.masks[k], rng, max_expand);
    let removed = spec.shapes[k].describe();
    Ok(TaskSample {
        id: String::new(),
        task: TaskKind::Inpaint,
        seed: spec.seed,
        masked_source: Some(apply_mask(&source, &mask)?),
        mask: Some(mask),
        source,
        pose: None,
        joints: None,
        references: Vec::new(),
        prompt: PromptTriple::new(format!("remove the {removed}"), scene_prompt(&spec.without(k)), false),
        target,
        meta: json!({ "shape": k, "removed": removed, "expand": expand }),
    })
}

/// Outpaint from a fixed crop box `(y0, x0, y1, x1)`; the box must cover at least
/// `min_frac` of each dimension.
pub fn build_outpaint_with_crop(spec: &SceneSpec, crop: (usize, usize, usize, usize), min_frac: f64) -> Result<TaskSample> {
    let (y0, x0, y1, x1) = crop;
    let (h, w) = (spec.height, spec.width);
    if y1 > h || x1 > w || y0 >= y1 || x0 >= x1 {
        return Err(Error::Spec(format!("crop {crop:?} outside the {h}x{w} canvas")));
    }
    if ((y1 - y0) as f64) < min_frac * h as f64 || ((x1 - x0) as f64) < min_frac * w as f64 {
        return Err(Error::Spec(format!("crop {crop:?} smaller than {min_frac} of the canvas")));
    }
    let (source, _) = gen_clip(spec)?;
    let mut mask = MaskVideo::full(spec.frames, h, w);
    for t in 0..spec.frames {
        for y in y0..y1 {
            for x in x0..x1 {
                mask.set(t, y, x, false);
            }
        }
    }
    Ok(TaskSample {
        id: String::new(),
        task: TaskKind::Outpaint,
        seed: spec.seed,
        masked_source: Some(apply_mask(&source, &mask)?),
        mask: Some(mask),
        target: source.clone(),
        source,
        pose: None,
        joints: None,
        references: Vec::new(),
        prompt: PromptTriple::new("extend the video beyond the visible box", scene_prompt(spec), false),
        meta: json!({ "crop": [y0, x0, y1, x1] }),
    })
}

pub fn build_outpaint<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R, min_frac: f64) -> Result<TaskSample> {
    let (h, w) = (spec.height, spec.width);
    let ch = rng.random_range(((min_frac * h as f64).ceil() as usize).min(h)..=h);
    let cw = rng.random_range(((min_frac * w as f64).ceil() as usize).min(w)..=w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    build_outpaint_with_crop(spec, (y0, x0, y0 + ch, x0 + cw), min_frac)
}

/// Addition: the target gains a shape that is absent from the source. The
/// source travels through the masked-source stream with an empty mask.
pub fn build_addition<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<TaskSample> {
    if spec.shapes.len() < 2 {
        return Err(Error::Spec("addition needs a scene with at least two shapes".into()));
    }
    let k = pick(rng, spec.shapes.len(), "addition")?;
    let without = spec.without(k);
    let (source, _) = gen_clip(&without)?;
    let (target, _) = gen_clip(spec)?;
    let added = spec.shapes[k].describe();
    let mask = MaskVideo::empty(spec.frames, spec.height, spec.width);
    Ok(TaskSample {
        id: String::new(),
        task: TaskKind::Addition,
        seed: spec.seed,
        masked_source: Some(source.clone()),
        mask: Some(mask),
        source,
        pose: None,
        joints: None,
        references: vec![canonical_crop(&spec.shapes[k], spec.height, spec.width)?],
        prompt: PromptTriple::new(format!("add a {added} to the video"), scene_prompt(spec), true),
        target,
        meta: json!({ "shape": k, "added": added, "color": color_name(spec.shapes[k].color) }),
    })
}

/// A replacement of one shape of a scene; swapping twice is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEditPlan {
    pub scene: SceneSpec,
    pub index: usize,
    pub replacement: Shape,
}

impl MaskEditPlan {
    pub fn new(scene: SceneSpec, index: usize, replacement: Shape) -> Result<Self> {
        let original = scene.shapes.get(index).ok_or_else(|| Error::Spec(format!("no shape {index} to replace")))?;
        if original.kind == replacement.kind && original.color == replacement.color {
            return Err(Error::Spec(format!("replacement {} is identical to the original", replacement.describe())));
        }
        scene.with_shape(index, replacement.clone()).validate()?;
        Ok(Self { scene, index, replacement })
    }

    pub fn original(&self) -> &Shape {
        &self.scene.shapes[self.index]
    }

    pub fn edited_scene(&self) -> SceneSpec {
        self.scene.with_shape(self.index, self.replacement.clone())
    }

    /// The reverse edit: start from the edited scene and restore the original shape.
    pub fn swap(&self) -> MaskEditPlan {
        MaskEditPlan { scene: self.edited_scene(), index: self.index, replacement: self.original().clone() }
    }
}

pub fn random_replacement<R: Rng + ?Sized>(rng: &mut R, spec: &SceneSpec, index: usize) -> Result<MaskEditPlan> {
    let original = spec.shapes.get(index).ok_or_else(|| Error::Spec(format!("no shape {index} to replace")))?;
    let used: Vec<usize> = spec.shapes.iter().map(|s| s.color).collect();
    for _ in 0..100 {
        let kind = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle][rng.random_range(0..3)];
        let color = rng.random_range(0..PALETTE.len());
        if color != original.color && used.contains(&color) {
            continue;
        }
        let repl = Shape { kind, color, ..original.clone() };
        if let Ok(plan) = MaskEditPlan::new(spec.clone(), index, repl) {
            return Ok(plan);
        }
    }
    Err(Error::Spec("no valid replacement shape found".into()))
}

/// Replace one shape along its trajectory; the mask is the dilated union of both footprints.
pub fn build_mask_edit<R: Rng + ?Sized>(plan: &MaskEditPlan, rng: &mut R, max_expand: usize) -> Result<TaskSample> {
    let (source, gt) = gen_clip(&plan.scene)?;
    let edited = plan.edited_scene();
    let (target, gt_t) = gen_clip(&edited)?;
    let union = gt.masks[plan.index].union(&gt_t.masks[plan.index]);
    let (mask, expand) = dilate_mask(&union, rng, max_expand);
    let (from, to) = (plan.original().describe(), plan.replacement.describe());
    Ok(TaskSample {
        id: String::new(),
        task: TaskKind::MaskEdit,
        seed: plan.scene.seed,
        masked_source: Some(apply_mask(&source, &mask)?),
        mask: Some(mask),
        source,
        pose: None,
        joints: None,
        references: vec![canonical_crop(&plan.replacement, plan.scene.height, plan.scene.width)?],
        prompt: PromptTriple::new(format!("replace the {from} with a {to}"), scene_prompt(&edited), true),
        target,
        meta: json!({ "plan": plan, "expand": expand, "replacement_color": color_name(plan.replacement.color) }),
    })
}

/// Body colors usable for figures (well apart from the joint markers).
pub const FIGURE_BODY_COLORS: [usize; 4] = [0, 8, 10, 11];

/// A single-figure scene.
pub fn figure_scene(height: usize, width: usize, frames: usize, figure: Shape, seed: u64) -> SceneSpec {
    SceneSpec { height, width, frames, shapes: vec![figure], seed }
}

/// A figure that stays inside a `height x width` canvas for 16 frames.
pub fn random_figure<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Shape {
    let unit = height.min(width) as f64 / 64.0;
    let color = FIGURE_BODY_COLORS[rng.random_range(0..FIGURE_BODY_COLORS.len())];
    loop {
        let size = rng.random_range(15.0..17.0) * unit;
        let x0 = width as f64 * rng.random_range(0.4..0.6);
        let y0 = height as f64 * rng.random_range(0.55..0.6);
        let traj = Trajectory::Linear { x0, y0, vx: rng.random_range(-0.3..0.3), vy: 0.0 };
        let mut s = Shape::new(ShapeKind::StickFigure, color, size, traj);
        s.motion = Some(random_motion(rng));
        if figure_scene(height, width, 16, s.clone(), 0).validate().is_ok() {
            return s;
        }
    }
}

pub fn random_motion<R: Rng + ?Sized>(rng: &mut R) -> FigureMotion {
    FigureMotion {
        arm_amp: rng.random_range(0.3..1.2),
        leg_amp: rng.random_range(0.1..0.5),
        period: rng.random_range(6.0..16.0),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

/// Pose-driven generation. With `augment`, a limb-length scale in
/// `[0.8, 1.25]` is drawn (redrawn while the figure would leave the canvas)
/// and applied to both the pose video and the target.
pub fn build_pose_drive<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R, augment: bool) -> Result<TaskSample> {
    let k = spec
        .shapes
        .iter()
        .position(|s| s.kind == ShapeKind::StickFigure)
        .ok_or_else(|| Error::Spec("pose-driven sample needs a stick figure".into()))?;
    let mut spec = spec.clone();
    if augment {
        let base = spec.clone();
        let mut ok = false;
        for _ in 0..50 {
            let b = rng.random_range(0.8..=1.25);
            spec.shapes[k].limb_scale = b;
            if spec.validate().is_ok() {
                ok = true;
                break;
            }
        }
        if !ok {
            spec = base;
        }
    }
    let (target, gt) = gen_clip(&spec)?;
    let joints = gt.joints.iter().find(|(i, _)| *i == k).map(|(_, j)| j.clone()).expect("figure joints");
    let pose = render_pose(&joints, spec.height, spec.width);
    let figure = &spec.shapes[k];
    let background = gen_clip(&spec.without(k))?.0;
    Ok(TaskSample {
        id: String::new(),
        task: TaskKind::PoseDrive,
        seed: spec.seed,
        source: background,
        masked_source: None,
        mask: None,
        pose: Some(pose),
        joints: Some(joints),
        references: vec![canonical_crop(figure, spec.height, spec.width)?],
        prompt: PromptTriple::new(
            "make the person follow the pose",
            format!("a {} figure dancing on a dark background", color_name(figure.color)),
            true,
        ),
        target,
        meta: json!({ "limb_scale": figure.limb_scale, "figure": figure }),
    })
}
