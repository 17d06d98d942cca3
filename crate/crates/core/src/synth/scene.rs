//! Procedural scenes: palette, shapes, trajectories and exact (aliased) rendering.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::pose::{figure_joints, FigureMotion, Joints, LIMBS};
use crate::video::{Image, MaskVideo, Rgb, VideoClip};

pub const BACKGROUND: Rgb = [0.06, 0.06, 0.08];
pub const MASK_FILL: Rgb = [0.5, 0.5, 0.5];

/// Minimum Euclidean RGB distance between any two palette entries.
pub const PALETTE_MIN_DISTANCE: f32 = 0.35;

pub const PALETTE: [(&str, Rgb); 12] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.15]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.9, 0.15, 0.85]),
    ("orange", [1.0, 0.55, 0.05]),
    ("purple", [0.5, 0.2, 0.75]),
    ("white", [0.95, 0.95, 0.95]),
    ("pink", [1.0, 0.6, 0.75]),
    ("brown", [0.55, 0.3, 0.1]),
    ("teal", [0.05, 0.45, 0.45]),
];

pub fn color_name(idx: usize) -> &'static str {
    PALETTE[idx % PALETTE.len()].0
}

pub fn color_rgb(idx: usize) -> Rgb {
    PALETTE[idx % PALETTE.len()].1
}

pub fn color_distance(a: Rgb, b: Rgb) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    StickFigure,
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::StickFigure => "figure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Linear { x0: f64, y0: f64, vx: f64, vy: f64 },
    Sinusoidal { x0: f64, y0: f64, ax: f64, ay: f64, period: f64, phase: f64 },
}

impl Trajectory {
    pub fn fixed(x0: f64, y0: f64) -> Self {
        Trajectory::Linear { x0, y0, vx: 0.0, vy: 0.0 }
    }

    pub fn position(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        match *self {
            Trajectory::Linear { x0, y0, vx, vy } => (x0 + vx * t, y0 + vy * t),
            Trajectory::Sinusoidal { x0, y0, ax, ay, period, phase } => {
                let a = std::f64::consts::TAU * t / period + phase;
                (x0 + ax * a.sin(), y0 + ay * a.sin())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Palette index.
    pub color: usize,
    /// Radius / half-side in pixels; for figures, the body scale.
    pub size: f64,
    pub trajectory: Trajectory,
    /// Limb animation, figures only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<FigureMotion>,
    /// Limb-length multiplier, figures only.
    #[serde(default = "one")]
    pub limb_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Shape {
    pub fn new(kind: ShapeKind, color: usize, size: f64, trajectory: Trajectory) -> Self {
        let motion = (kind == ShapeKind::StickFigure).then(FigureMotion::default);
        Self { kind, color, size, trajectory, motion, limb_scale: 1.0 }
    }

    pub fn describe(&self) -> String {
        format!("{} {}", color_name(self.color), self.kind.name())
    }

    pub fn joints(&self, t: usize) -> Option<Joints> {
        (self.kind == ShapeKind::StickFigure).then(|| {
            let (x, y) = self.trajectory.position(t);
            figure_joints(x, y, self.size, self.limb_scale, &self.motion.unwrap_or_default(), t)
        })
    }

    /// Conservative pixel extent `(x0, y0, x1, y1)` at frame `t`.
    pub fn extent(&self, t: usize) -> (f64, f64, f64, f64) {
        let (x, y) = self.trajectory.position(t);
        let s = self.size;
        match self.kind {
            ShapeKind::Circle | ShapeKind::Square | ShapeKind::Triangle => (x - s, y - s, x + s, y + s),
            ShapeKind::StickFigure => {
                let j = self.joints(t).expect("figure");
                let pad = figure_pad(s);
                let mut e = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
                for p in j.points.iter().chain(std::iter::once(&j.pelvis)) {
                    e = (e.0.min(p.0), e.1.min(p.1), e.2.max(p.0), e.3.max(p.1));
                }
                (e.0 - pad, e.1 - pad, e.2 + pad, e.3 + pad)
            }
        }
    }

    /// Does pixel `(y, x)` belong to the shape at frame `t`? Pixel centers are sampled.
    pub fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let (cx, cy) = self.trajectory.position(t);
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let s = self.size;
        match self.kind {
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= s * s,
            ShapeKind::Square => (px - cx).abs() <= s && (py - cy).abs() <= s,
            ShapeKind::Triangle => in_triangle((px, py), (cx, cy - s), (cx - s, cy + s), (cx + s, cy + s)),
            ShapeKind::StickFigure => self.figure_color(t, y, x).is_some(),
        }
    }

    /// Color of a figure pixel: joint marker, body line or head, or `None`.
    fn figure_color(&self, t: usize, y: usize, x: usize) -> Option<Rgb> {
        let j = self.joints(t)?;
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let m = marker_radius(self.size);
        for (k, q) in j.points.iter().enumerate().skip(1) {
            if (p.0 - q.0).abs() <= m && (p.1 - q.1).abs() <= m {
                return Some(FIGURE_JOINT_COLORS[k]);
            }
        }
        let head = j.points[0];
        let body = color_rgb(self.color);
        if (p.0 - head.0).powi(2) + (p.1 - head.1).powi(2) <= head_radius(self.size).powi(2) {
            return Some(if (p.0 - head.0).abs() <= m && (p.1 - head.1).abs() <= m { FIGURE_JOINT_COLORS[0] } else { body });
        }
        let half = line_width(self.size) / 2.0;
        for &(a, b) in LIMBS.iter() {
            if segment_distance(p, j.point(a), j.point(b)) <= half {
                return Some(body);
            }
        }
        None
    }

    pub fn color_at(&self, t: usize, y: usize, x: usize) -> Option<Rgb> {
        match self.kind {
            ShapeKind::StickFigure => self.figure_color(t, y, x),
            _ => self.covers(t, y, x).then(|| color_rgb(self.color)),
        }
    }
}

/// Joint marker colors of rendered figures (head, neck, elbows, hands, feet).
pub const FIGURE_JOINT_COLORS: [Rgb; 8] = [
    [0.5, 1.0, 0.0],
    [0.0, 0.5, 1.0],
    [1.0, 0.0, 0.5],
    [0.5, 0.0, 1.0],
    [0.0, 1.0, 0.5],
    [1.0, 0.5, 0.5],
    [0.5, 0.5, 1.0],
    [1.0, 1.0, 0.5],
];

/// Background and body colors of a rendered figure of palette color `body`.
pub fn figure_distractors(body: usize) -> Vec<Rgb> {
    vec![BACKGROUND, color_rgb(body)]
}

pub(crate) fn marker_radius(size: f64) -> f64 {
    (size * 0.22).max(1.5)
}

pub(crate) fn head_radius(size: f64) -> f64 {
    size * 0.28
}

pub(crate) fn line_width(size: f64) -> f64 {
    (size * 0.2).max(2.0)
}

fn figure_pad(size: f64) -> f64 {
    head_radius(size).max(marker_radius(size)).max(line_width(size)) + 1.0
}

fn in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let edge = |u: (f64, f64), v: (f64, f64)| (v.0 - u.0) * (p.1 - u.1) - (v.1 - u.1) * (p.0 - u.0);
    let (d1, d2, d3) = (edge(a, b), edge(b, c), edge(c, a));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

pub(crate) fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - u * dx).powi(2) + (p.1 - a.1 - u * dy).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shapes: Vec<Shape>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Spec("empty canvas or frame count".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.color >= PALETTE.len() {
                return Err(Error::Spec(format!("shape {i}: color index {} outside palette", s.color)));
            }
            if !(s.size > 0.0) {
                return Err(Error::Spec(format!("shape {i}: size must be positive")));
            }
            for t in 0..self.frames {
                let (x0, y0, x1, y1) = s.extent(t);
                if x0 < 0.0 || y0 < 0.0 || x1 > self.width as f64 || y1 > self.height as f64 {
                    return Err(Error::Spec(format!("shape {i} ({}) leaves the canvas at frame {t}", s.describe())));
                }
            }
        }
        Ok(())
    }

    pub fn without(&self, index: usize) -> SceneSpec {
        let mut s = self.clone();
        s.shapes.remove(index);
        s
    }

    pub fn with_shape(&self, index: usize, shape: Shape) -> SceneSpec {
        let mut s = self.clone();
        s.shapes[index] = shape;
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// One mask video per shape (full footprint, occlusion ignored).
    pub masks: Vec<MaskVideo>,
    /// Per shape, per frame `(y0, x0, y1, x1)` exclusive.
    pub boxes: Vec<Vec<Option<(usize, usize, usize, usize)>>>,
    /// Per figure shape index: per-frame joints.
    pub joints: Vec<(usize, Vec<Joints>)>,
}

/// Render a scene; later shapes are drawn on top.
pub fn gen_clip(spec: &SceneSpec) -> Result<(VideoClip, GroundTruth)> {
    spec.validate()?;
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let mut clip = VideoClip::filled(t_n, h, w, BACKGROUND);
    let mut masks = vec![MaskVideo::empty(t_n, h, w); spec.shapes.len()];
    for (si, s) in spec.shapes.iter().enumerate() {
        for t in 0..t_n {
            let (x0, y0, x1, y1) = s.extent(t);
            let (ya, yb) = ((y0.floor().max(0.0)) as usize, (y1.ceil() as usize).min(h));
            let (xa, xb) = ((x0.floor().max(0.0)) as usize, (x1.ceil() as usize).min(w));
            for y in ya..yb {
                for x in xa..xb {
                    if let Some(c) = s.color_at(t, y, x) {
                        clip.set(t, y, x, c);
                        masks[si].set(t, y, x, true);
                    }
                }
            }
        }
    }
    let boxes = masks.iter().map(|m| (0..t_n).map(|t| m.bbox(t)).collect()).collect();
    let joints = spec
        .shapes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == ShapeKind::StickFigure)
        .map(|(i, s)| (i, (0..t_n).map(|t| s.joints(t).expect("figure")).collect()))
        .collect();
    Ok((clip, GroundTruth { masks, boxes, joints }))
}

/// The shape alone, centered on a mid-gray canvas (reference-image crop).
pub fn canonical_crop(shape: &Shape, height: usize, width: usize) -> Result<Image> {
    let mut s = shape.clone();
    s.trajectory = Trajectory::fixed(width as f64 / 2.0, height as f64 / 2.0);
    if let Some(m) = &mut s.motion {
        *m = FigureMotion::rest();
    }
    // center the bounding box rather than the anchor point
    let e = s.extent(0);
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    s.trajectory = Trajectory::fixed(2.0 * cx - (e.0 + e.2) / 2.0, 2.0 * cy - (e.1 + e.3) / 2.0);
    let spec = SceneSpec { height, width, frames: 1, shapes: vec![s], seed: 0 };
    spec.validate()?;
    let mut img = Image::filled(height, width, MASK_FILL);
    let shape = &spec.shapes[0];
    for y in 0..height {
        for x in 0..width {
            if let Some(c) = shape.color_at(0, y, x) {
                img.set(y, x, c);
            }
        }
    }
    Ok(img)
}

/// Grow every frame's mask by `(top, bottom, left, right)` pixels, clipped at the border.
pub fn dilate_mask_by(mask: &MaskVideo, top: usize, bottom: usize, left: usize, right: usize) -> MaskVideo {
    let (t_n, h, w) = (mask.frames, mask.height, mask.width);
    let mut rows = MaskVideo::empty(t_n, h, w);
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                if mask.get(t, y, x) {
                    for yy in y.saturating_sub(top)..(y + bottom + 1).min(h) {
                        rows.set(t, yy, x, true);
                    }
                }
            }
        }
    }
    let mut out = MaskVideo::empty(t_n, h, w);
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                if rows.get(t, y, x) {
                    for xx in x.saturating_sub(left)..(x + right + 1).min(w) {
                        out.set(t, y, xx, true);
                    }
                }
            }
        }
    }
    out
}

/// Random per-side expansion in `[0, max_expand]`, the same for every frame.
pub fn dilate_mask<R: Rng + ?Sized>(mask: &MaskVideo, rng: &mut R, max_expand: usize) -> (MaskVideo, [usize; 4]) {
    let mut side = || rng.random_range(0..=max_expand);
    let e = [side(), side(), side(), side()];
    (dilate_mask_by(mask, e[0], e[1], e[2], e[3]), e)
}

/// Pixels within `tol` of `color`, per frame.
pub fn color_mask(clip: &VideoClip, color: Rgb, tol: f32) -> MaskVideo {
    let mut m = MaskVideo::empty(clip.frames, clip.height, clip.width);
    for t in 0..clip.frames {
        for y in 0..clip.height {
            for x in 0..clip.width {
                if color_distance(clip.get(t, y, x), color) <= tol {
                    m.set(t, y, x, true);
                }
            }
        }
    }
    m
}

/// A random roster of `n` plain shapes with distinct colors that stays inside the canvas.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, frames: usize, n: usize, seed: u64) -> Result<SceneSpec> {
    if n > PALETTE.len() {
        return Err(Error::Spec(format!("{n} shapes exceed the palette")));
    }
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let color = colors.swap_remove(rng.random_range(0..colors.len()));
        let kind = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle][rng.random_range(0..3)];
        let mut placed = None;
        for _ in 0..200 {
            let size = rng.random_range(5.0..9.0);
            let traj = random_trajectory(rng, height, width, frames, size);
            let s = Shape::new(kind, color, size, traj);
            let spec = SceneSpec { height, width, frames, shapes: vec![s.clone()], seed };
            if spec.validate().is_ok() {
                placed = Some(s);
                break;
            }
        }
        shapes.push(placed.ok_or_else(|| Error::Spec("could not place a shape inside the canvas".into()))?);
    }
    Ok(SceneSpec { height, width, frames, shapes, seed })
}

fn random_trajectory<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, frames: usize, size: f64) -> Trajectory {
    let (h, w) = (height as f64, width as f64);
    let x0 = rng.random_range(size..w - size);
    let y0 = rng.random_range(size..h - size);
    if rng.random_bool(0.7) {
        let span = frames.max(2) as f64 - 1.0;
        let vx = rng.random_range(-1.0..1.0) * ((w - 2.0 * size) / span).min(2.0);
        let vy = rng.random_range(-1.0..1.0) * ((h - 2.0 * size) / span).min(2.0);
        Trajectory::Linear { x0, y0, vx, vy }
    } else {
        Trajectory::Sinusoidal {
            x0,
            y0,
            ax: rng.random_range(0.0..8.0),
            ay: rng.random_range(0.0..8.0),
            period: rng.random_range(8.0..24.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }
}
