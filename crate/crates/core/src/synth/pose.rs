//! Stick-figure skeletons, pose-video rendering and the color-centroid joint decoder.

use serde::{Deserialize, Serialize};

use crate::synth::scene::{color_distance, segment_distance};
use crate::video::{Image, Rgb, VideoClip};

pub const JOINT_NAMES: [&str; 8] = ["head", "neck", "left_elbow", "right_elbow", "left_hand", "right_hand", "left_foot", "right_foot"];
pub const HEAD: usize = 0;
pub const NECK: usize = 1;
/// Virtual index of the derived pelvis in [`LIMBS`].
pub const PELVIS: usize = 8;

/// Limbs as joint-index pairs; index 8 is the pelvis.
pub const LIMBS: [(usize, usize); 8] = [(0, 1), (1, 8), (1, 2), (2, 4), (1, 3), (3, 5), (8, 6), (8, 7)];

/// Joint marker colors of pose videos.
pub const POSE_JOINT_COLORS: [Rgb; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 1.0],
];

/// One dimmed color per limb, taken from the limb's outer joint.
pub fn limb_color(limb: usize) -> Rgb {
    const OUTER: [usize; 8] = [HEAD, NECK, 2, 4, 3, 5, 6, 7];
    let c = POSE_JOINT_COLORS[OUTER[limb]];
    [0.4 * c[0], 0.4 * c[1], 0.4 * c[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joints {
    /// `(x, y)` pixel coordinates, in [`JOINT_NAMES`] order.
    pub points: [(f64, f64); 8],
    pub pelvis: (f64, f64),
}

impl Joints {
    pub fn point(&self, i: usize) -> (f64, f64) {
        if i == PELVIS {
            self.pelvis
        } else {
            self.points[i]
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Joints {
        let mut j = *self;
        for p in j.points.iter_mut().chain(std::iter::once(&mut j.pelvis)) {
            p.0 += dx;
            p.1 += dy;
        }
        j
    }
}

/// Periodic limb swing of a figure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FigureMotion {
    pub arm_amp: f64,
    pub leg_amp: f64,
    pub period: f64,
    pub phase: f64,
}

impl Default for FigureMotion {
    fn default() -> Self {
        Self { arm_amp: 0.8, leg_amp: 0.35, period: 8.0, phase: 0.0 }
    }
}

impl FigureMotion {
    pub fn rest() -> Self {
        Self { arm_amp: 0.0, leg_amp: 0.0, period: 8.0, phase: 0.0 }
    }
}

/// Joint positions of a figure whose pelvis is at `(x, y)` on frame `t`.
pub fn figure_joints(x: f64, y: f64, size: f64, limb_scale: f64, motion: &FigureMotion, t: usize) -> Joints {
    let l = size * limb_scale;
    let a = std::f64::consts::TAU * t as f64 / motion.period + motion.phase;
    let swing = a.sin();
    let pelvis = (x, y);
    let neck = (x, y - 0.9 * l);
    let head = (x, neck.1 - 0.45 * l);
    let (upper, fore, leg) = (0.5 * l, 0.45 * l, 0.95 * l);
    // angles from straight down; left limbs open towards -x
    let arm_l = 0.7 + motion.arm_amp * swing;
    let arm_r = 0.7 - motion.arm_amp * swing;
    let dir = |ang: f64, side: f64| (side * ang.sin(), ang.cos());
    let add = |p: (f64, f64), d: (f64, f64), k: f64| (p.0 + k * d.0, p.1 + k * d.1);
    let el_l = add(neck, dir(arm_l, -1.0), upper);
    let el_r = add(neck, dir(arm_r, 1.0), upper);
    let ha_l = add(el_l, dir(arm_l + 0.5, -1.0), fore);
    let ha_r = add(el_r, dir(arm_r + 0.5, 1.0), fore);
    let ft_l = add(pelvis, dir(0.35 + motion.leg_amp * swing, -1.0), leg);
    let ft_r = add(pelvis, dir(0.35 - motion.leg_amp * swing, 1.0), leg);
    Joints { points: [head, neck, el_l, el_r, ha_l, ha_r, ft_l, ft_r], pelvis }
}

/// Colored skeleton on black: one dim color per limb, a 3x3 marker per joint.
pub fn render_pose(joints: &[Joints], height: usize, width: usize) -> VideoClip {
    let mut clip = VideoClip::filled(joints.len(), height, width, [0.0; 3]);
    for (t, j) in joints.iter().enumerate() {
        for y in 0..height {
            for x in 0..width {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                for (k, &(a, b)) in LIMBS.iter().enumerate() {
                    if segment_distance(p, j.point(a), j.point(b)) <= 1.0 {
                        clip.set(t, y, x, limb_color(k));
                    }
                }
            }
        }
        for (k, q) in j.points.iter().enumerate() {
            let (cx, cy) = (q.0.floor() as i64, q.1.floor() as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                        clip.set(t, y as usize, x as usize, POSE_JOINT_COLORS[k]);
                    }
                }
            }
        }
    }
    clip
}

/// Nearest-color joint decoder. Every pixel is assigned to the closest of
/// the joint colors and the distractor colors (background, body, limbs); a
/// joint is the centroid of its pixels, each weighted by how much closer it
/// is to that joint color than to the runner-up class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointDecoder {
    /// Total weight below which a joint counts as missing.
    pub min_weight: f64,
}

impl Default for JointDecoder {
    fn default() -> Self {
        Self { min_weight: 0.05 }
    }
}

impl JointDecoder {
    pub fn decode_frame(&self, frame: &Image, joints: &[Rgb; 8], distractors: &[Rgb]) -> [Option<(f64, f64)>; 8] {
        let mut acc = [(0f64, 0f64, 0f64); 8];
        for y in 0..frame.height {
            for x in 0..frame.width {
                let p = frame.get(y, x);
                let (mut best, mut second, mut k) = (f32::INFINITY, f32::INFINITY, usize::MAX);
                for (i, &c) in joints.iter().chain(distractors).enumerate() {
                    let d = color_distance(p, c);
                    if d < best {
                        second = best;
                        best = d;
                        k = i;
                    } else if d < second {
                        second = d;
                    }
                }
                if k < 8 {
                    let w = (second - best) as f64;
                    acc[k].0 += w;
                    acc[k].1 += w * (x as f64 + 0.5);
                    acc[k].2 += w * (y as f64 + 0.5);
                }
            }
        }
        acc.map(|(w, sx, sy)| (w >= self.min_weight).then(|| (sx / w, sy / w)))
    }

    pub fn decode(&self, clip: &VideoClip, joints: &[Rgb; 8], distractors: &[Rgb]) -> Vec<[Option<(f64, f64)>; 8]> {
        clip.frames_iter().map(|f| self.decode_frame(&f, joints, distractors)).collect()
    }
}

/// Background and limb colors of a rendered pose video.
pub fn pose_distractors() -> Vec<Rgb> {
    std::iter::once([0.0; 3]).chain((0..LIMBS.len()).map(limb_color)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk(frames: usize, motion: FigureMotion) -> Vec<Joints> {
        (0..frames).map(|t| figure_joints(32.0, 40.0, 12.0, 1.0, &motion, t)).collect()
    }

    #[test]
    fn limb_colors_are_distinct() {
        for a in 0..8 {
            for b in a + 1..8 {
                assert!(color_distance(limb_color(a), limb_color(b)) > 0.1);
                assert!(color_distance(POSE_JOINT_COLORS[a], POSE_JOINT_COLORS[b]) >= 0.5);
            }
            for j in POSE_JOINT_COLORS {
                assert!(color_distance(limb_color(a), j) > 0.35);
            }
        }
    }

    #[test]
    fn zero_motion_gives_constant_pose_video() {
        let clip = render_pose(&walk(6, FigureMotion::rest()), 64, 64);
        for t in 1..6 {
            assert_eq!(clip.frame(t), clip.frame(0));
        }
    }

    #[test]
    fn unit_limb_scale_keeps_joints() {
        let m = FigureMotion::default();
        for t in 0..4 {
            let a = figure_joints(30.0, 40.0, 12.0, 1.0, &m, t);
            let b = figure_joints(30.0, 40.0, 12.0, 1.0, &m, t);
            assert_eq!(a, b);
            let c = figure_joints(30.0, 40.0, 12.0, 1.2, &m, t);
            assert_ne!(a, c);
            assert_eq!(a.pelvis, c.pelvis);
        }
    }

    #[test]
    fn decoder_recovers_joints_within_a_pixel() {
        let joints = walk(8, FigureMotion::default());
        let clip = render_pose(&joints, 64, 64);
        let dec = JointDecoder::default().decode(&clip, &POSE_JOINT_COLORS, &pose_distractors());
        for (t, frame) in dec.iter().enumerate() {
            for k in 0..8 {
                let (x, y) = frame[k].expect("decoded");
                let (gx, gy) = joints[t].points[k];
                let err = ((x - gx).powi(2) + (y - gy).powi(2)).sqrt();
                assert!(err <= 1.0, "frame {t} joint {}: {err}", JOINT_NAMES[k]);
            }
        }
    }

    #[test]
    fn blank_frame_has_missing_joints() {
        let dec = JointDecoder::default().decode_frame(&Image::filled(16, 16, [0.0; 3]), &POSE_JOINT_COLORS, &pose_distractors());
        assert!(dec.iter().all(|j| j.is_none()));
    }
}
