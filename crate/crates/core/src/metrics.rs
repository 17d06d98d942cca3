//! Clip-level metrics: frame coherence, motion, region fidelity, object
//! similarity against a reference image, pose error and copy-paste score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::pose::{pose_distractors, JointDecoder, POSE_JOINT_COLORS};
use crate::synth::scene::{color_distance, BACKGROUND, FIGURE_JOINT_COLORS, MASK_FILL};
use crate::video::{Image, MaskVideo, Rgb, VideoClip};

/// PSNR reported for identical regions.
pub const PSNR_CAP: f64 = 99.0;

/// Image -> unit-norm feature vector.
pub trait Embedder {
    fn embed(&self, image: &Image) -> Vec<f64>;
}

/// Mean color of each cell of a `grid x grid` partition, minus the image's
/// mean color. A uniform image maps to a fixed unit vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchColorEmbedder {
    pub grid: usize,
}

impl Default for PatchColorEmbedder {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl Embedder for PatchColorEmbedder {
    fn embed(&self, image: &Image) -> Vec<f64> {
        let g = self.grid.max(1);
        let mut cells = vec![[0f64; 3]; g * g];
        let mut counts = vec![0usize; g * g];
        let mut total = [0f64; 3];
        for y in 0..image.height {
            for x in 0..image.width {
                let c = image.get(y, x);
                let k = (y * g / image.height) * g + x * g / image.width;
                counts[k] += 1;
                for ch in 0..3 {
                    cells[k][ch] += c[ch] as f64;
                    total[ch] += c[ch] as f64;
                }
            }
        }
        let n = (image.height * image.width).max(1) as f64;
        let mut v = Vec::with_capacity(3 * g * g);
        for (cell, &cnt) in cells.iter().zip(&counts) {
            for ch in 0..3 {
                let mean = if cnt > 0 { cell[ch] / cnt as f64 } else { total[ch] / n };
                v.push(mean - total[ch] / n);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            let mut e = vec![0.0; v.len()];
            e[0] = 1.0;
            return e;
        }
        v.iter().map(|x| x / norm).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn need_frames(clip: &VideoClip) -> Result<()> {
    if clip.frames < 2 {
        return Err(Error::validation(format!("metric needs at least 2 frames, clip has {}", clip.frames)));
    }
    Ok(())
}

/// Mean over frames `k >= 1` of the average of the cosine to frame `k - 1`
/// and to frame 0.
pub fn temporal_consistency(clip: &VideoClip, embedder: &dyn Embedder) -> Result<f64> {
    need_frames(clip)?;
    let f: Vec<Vec<f64>> = clip.frames_iter().map(|im| embedder.embed(&im)).collect();
    let s: f64 = (1..f.len()).map(|k| 0.5 * (cosine(&f[k], &f[k - 1]) + cosine(&f[k], &f[0]))).sum();
    Ok(s / (f.len() - 1) as f64)
}

/// Mean absolute inter-frame difference per pixel and channel, averaged over
/// frame pairs. Values lie in `[0, 1]` for clips in `[0, 1]`.
pub fn dynamic_degree(clip: &VideoClip) -> Result<f64> {
    dynamic_degree_in(clip, None)
}

/// [`dynamic_degree`] restricted to pixels inside `region` on either frame of a pair.
pub fn dynamic_degree_in(clip: &VideoClip, region: Option<&MaskVideo>) -> Result<f64> {
    need_frames(clip)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 1..clip.frames {
        for y in 0..clip.height {
            for x in 0..clip.width {
                if let Some(m) = region {
                    if !(m.get(t, y, x) || m.get(t - 1, y, x)) {
                        continue;
                    }
                }
                let (a, b) = (clip.get(t, y, x), clip.get(t - 1, y, x));
                sum += (0..3).map(|c| (a[c] - b[c]).abs() as f64).sum::<f64>();
                n += 3;
            }
        }
    }
    if n == 0 {
        return Err(Error::validation("dynamic degree over an empty region"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Inside,
    Outside,
}

/// PSNR (peak 1) over the pixels of the selected region, capped at [`PSNR_CAP`].
pub fn region_psnr(generated: &VideoClip, source: &VideoClip, mask: &MaskVideo, region: Region) -> Result<f64> {
    if !generated.same_shape(source) || (mask.frames, mask.height, mask.width) != (source.frames, source.height, source.width) {
        return Err(Error::shape("region_psnr needs clips and mask of equal shape"));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for t in 0..source.frames {
        for y in 0..source.height {
            for x in 0..source.width {
                if mask.get(t, y, x) != (region == Region::Inside) {
                    continue;
                }
                let (a, b) = (generated.get(t, y, x), source.get(t, y, x));
                se += (0..3).map(|c| ((a[c] - b[c]) as f64).powi(2)).sum::<f64>();
                n += 3;
            }
        }
    }
    if n == 0 {
        return Err(Error::validation(format!("{region:?} region is empty")));
    }
    Ok(psnr_from_mse(se / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Pixels of `frame` selected by `keep`, placed on mid-gray so that the
/// selection's bounding box is centered. `None` when nothing is selected.
pub fn center_object(frame: &Image, keep: impl Fn(usize, usize) -> bool) -> Option<Image> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..frame.height {
        for x in 0..frame.width {
            if keep(y, x) {
                bb = Some(match bb {
                    None => (y, x, y + 1, x + 1),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                });
            }
        }
    }
    let (y0, x0, y1, x1) = bb?;
    let dy = (frame.height as i64 - (y0 + y1) as i64) / 2;
    let dx = (frame.width as i64 - (x0 + x1) as i64) / 2;
    let mut out = Image::filled(frame.height, frame.width, MASK_FILL);
    for y in y0..y1 {
        for x in x0..x1 {
            if keep(y, x) {
                let (ty, tx) = (y as i64 + dy, x as i64 + dx);
                if ty >= 0 && tx >= 0 && (ty as usize) < frame.height && (tx as usize) < frame.width {
                    out.set(ty as usize, tx as usize, frame.get(y, x));
                }
            }
        }
    }
    Some(out)
}

/// Pixels of a reference image (an object on mid-gray) that belong to the object.
pub fn reference_object(reference: &Image, tol: f32) -> Option<Image> {
    center_object(reference, |y, x| color_distance(reference.get(y, x), MASK_FILL) > tol)
}

/// Non-background pixels of `clip` inside `region`.
pub fn detect_foreground(clip: &VideoClip, region: Option<&MaskVideo>, tol: f32) -> MaskVideo {
    let mut m = MaskVideo::empty(clip.frames, clip.height, clip.width);
    for t in 0..clip.frames {
        for y in 0..clip.height {
            for x in 0..clip.width {
                let inside = region.is_none_or(|r| r.get(t, y, x));
                if inside && color_distance(clip.get(t, y, x), BACKGROUND) > tol {
                    m.set(t, y, x, true);
                }
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSimilarity {
    /// `None` when the object is detected in fewer than half the frames.
    pub score: Option<f64>,
    pub detected_frames: usize,
    pub frames: usize,
}

/// Mean cosine between the reference object and the detected object of each
/// frame, both centered on mid-gray before embedding.
pub fn object_similarity(reference: &Image, clip: &VideoClip, detected: &MaskVideo, embedder: &dyn Embedder) -> Result<ObjectSimilarity> {
    if (detected.frames, detected.height, detected.width) != (clip.frames, clip.height, clip.width) {
        return Err(Error::shape("detection mask does not match the clip"));
    }
    let r = reference_object(reference, 0.05).ok_or_else(|| Error::validation("reference image has no object"))?;
    let r = if (r.height, r.width) != (clip.height, clip.width) { r.resize_nearest(clip.height, clip.width) } else { r };
    let er = embedder.embed(&r);
    let mut sims = Vec::new();
    for t in 0..clip.frames {
        let frame = clip.frame(t);
        if let Some(obj) = center_object(&frame, |y, x| detected.get(t, y, x)) {
            sims.push(cosine(&er, &embedder.embed(&obj)));
        }
    }
    let detected_frames = sims.len();
    let score = (2 * detected_frames >= clip.frames && detected_frames > 0).then(|| sims.iter().sum::<f64>() / detected_frames as f64);
    Ok(ObjectSimilarity { score, detected_frames, frames: clip.frames })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Mean pixel distance over joints decoded in both clips.
    pub mean_px: Option<f64>,
    /// Joints undecodable in the generated clip.
    pub missing: usize,
    pub total: usize,
}

impl PoseError {
    /// Mean with every missing joint charged `penalty` pixels.
    pub fn penalized(&self, penalty: f64) -> f64 {
        let found = self.total - self.missing;
        (self.mean_px.unwrap_or(0.0) * found as f64 + penalty * self.missing as f64) / self.total.max(1) as f64
    }
}

/// Distance between joints decoded from a generated figure clip (body color
/// `body`) and joints decoded from the conditioning pose video.
pub fn pose_error(generated: &VideoClip, pose_video: &VideoClip, body: Rgb, decoder: &JointDecoder) -> Result<PoseError> {
    if generated.frames != pose_video.frames {
        return Err(Error::shape("generated clip and pose video differ in frame count"));
    }
    let cond = decoder.decode(pose_video, &POSE_JOINT_COLORS, &pose_distractors());
    let gen = decoder.decode(generated, &FIGURE_JOINT_COLORS, &[BACKGROUND, body]);
    let (mut sum, mut found, mut missing, mut total) = (0.0, 0usize, 0usize, 0usize);
    for (c, g) in cond.iter().zip(&gen) {
        for k in 0..8 {
            let Some(p) = c[k] else { continue };
            total += 1;
            match g[k] {
                Some(q) => {
                    sum += ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
                    found += 1;
                }
                None => missing += 1,
            }
        }
    }
    if total == 0 {
        return Err(Error::validation("no joints decodable in the pose video"));
    }
    Ok(PoseError { mean_px: (found > 0).then(|| sum / found as f64), missing, total })
}

/// Pearson correlation between the reference image and a generated frame
/// over the pixels outside `motion`, averaged over color channels. A channel
/// that is constant on either side contributes 0.
pub fn copy_paste_score(reference: &Image, frame: &Image, motion: &[bool]) -> Result<f64> {
    if (reference.height, reference.width) != (frame.height, frame.width) || motion.len() != frame.height * frame.width {
        return Err(Error::shape("copy-paste score needs equal-sized images and motion map"));
    }
    let idx: Vec<(usize, usize)> = (0..frame.height)
        .flat_map(|y| (0..frame.width).map(move |x| (y, x)))
        .filter(|&(y, x)| !motion[y * frame.width + x])
        .collect();
    if idx.is_empty() {
        return Err(Error::validation("motion region covers the whole frame"));
    }
    let n = idx.len() as f64;
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = idx.iter().map(|&(y, x)| reference.get(y, x)[c] as f64).collect();
        let b: Vec<f64> = idx.iter().map(|&(y, x)| frame.get(y, x)[c] as f64).collect();
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        if va > 1e-12 && vb > 1e-12 {
            total += cov / (va * vb).sqrt();
        }
    }
    Ok(total / 3.0)
}

/// Euclidean distance between two clips over every pixel value.
pub fn pixel_l2(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("pixel distance needs equal-shaped clips"));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt())
}

/// Pixels where any frame of `a` differs from `b` by more than `tol`.
pub fn motion_map(a: &VideoClip, b: &VideoClip, tol: f32) -> Vec<bool> {
    let mut m = vec![false; a.height * a.width];
    for t in 0..a.frames {
        for y in 0..a.height {
            for x in 0..a.width {
                if color_distance(a.get(t, y, x), b.get(t, y, x)) > tol {
                    m[y * a.width + x] = true;
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::pose::{figure_joints, render_pose, FigureMotion};
    use crate::synth::scene::{color_rgb, gen_clip, SceneSpec, Shape, ShapeKind, Trajectory};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn moving(kind: ShapeKind, color: usize, vx: f64) -> VideoClip {
        let s = Shape::new(kind, color, 6.0, Trajectory::Linear { x0: 12.0, y0: 32.0, vx, vy: 0.0 });
        gen_clip(&SceneSpec { height: 64, width: 64, frames: 8, shapes: vec![s], seed: 0 }).unwrap().0
    }

    fn noise_clip(rng: &mut ChaCha8Rng, frames: usize) -> VideoClip {
        let data = (0..frames * 64 * 64 * 3).map(|_| rng.random::<f32>()).collect();
        VideoClip::from_vec(frames, 64, 64, data).unwrap()
    }

    #[test]
    fn embedder_is_unit_norm_and_deterministic() {
        let e = PatchColorEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for im in [noise_clip(&mut rng, 1).frame(0), Image::filled(64, 64, [0.3, 0.3, 0.3]), moving(ShapeKind::Circle, 0, 0.0).frame(0)] {
            let v = e.embed(&im);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(v, e.embed(&im));
        }
    }

    #[test]
    fn temporal_consistency_cases() {
        let e = PatchColorEmbedder::default();
        let stat = moving(ShapeKind::Square, 2, 0.0);
        assert!((temporal_consistency(&stat, &e).unwrap() - 1.0).abs() < 1e-12);
        let mut outlier = stat.clone();
        for y in 0..64 {
            for x in 0..32 {
                outlier.set(4, y, x, [1.0, 1.0, 1.0]);
            }
        }
        assert!(temporal_consistency(&outlier, &e).unwrap() < temporal_consistency(&stat, &e).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mean = (0..100).map(|_| temporal_consistency(&noise_clip(&mut rng, 4), &e).unwrap()).sum::<f64>() / 100.0;
        assert!(mean.abs() < 0.1, "{mean}");
        assert!(temporal_consistency(&VideoClip::filled(1, 8, 8, [0.0; 3]), &e).is_err());
    }

    #[test]
    fn dynamic_degree_cases() {
        assert_eq!(dynamic_degree(&moving(ShapeKind::Circle, 0, 0.0)).unwrap(), 0.0);
        let slow = moving(ShapeKind::Circle, 0, 2.0);
        let fast = moving(ShapeKind::Circle, 0, 4.0);
        assert!(dynamic_degree(&fast).unwrap() > dynamic_degree(&slow).unwrap());
        assert_eq!(dynamic_degree(&slow).unwrap(), dynamic_degree(&slow.flip_horizontal()).unwrap());
        assert!(dynamic_degree(&VideoClip::filled(1, 8, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn region_psnr_cases() {
        let src = moving(ShapeKind::Triangle, 3, 1.0);
        let mut mask = MaskVideo::empty(8, 64, 64);
        for t in 0..8 {
            for y in 0..32 {
                for x in 0..64 {
                    mask.set(t, y, x, true);
                }
            }
        }
        assert_eq!(region_psnr(&src, &src, &mask, Region::Outside).unwrap(), PSNR_CAP);
        // +-a noise with random sign: rms = a
        let a = 0.05f32;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut noisy = VideoClip::filled(8, 64, 64, [0.5; 3]);
        let base = noisy.clone();
        for v in noisy.data.iter_mut() {
            *v += if rng.random::<bool>() { a } else { -a };
        }
        let expect = 20.0 * (1.0 / a as f64).log10();
        assert!((region_psnr(&noisy, &base, &mask, Region::Inside).unwrap() - expect).abs() < 0.1);
        let mut edited = src.clone();
        for t in 0..8 {
            for y in 0..32 {
                for x in 0..64 {
                    edited.set(t, y, x, [1.0, 0.0, 0.0]);
                }
            }
        }
        assert_eq!(region_psnr(&edited, &src, &mask, Region::Outside).unwrap(), PSNR_CAP);
        assert!(region_psnr(&src, &src, &MaskVideo::empty(8, 64, 64), Region::Inside).is_err());
    }

    fn paste(reference: &Image, frames: usize, dx: i64) -> VideoClip {
        let mut clip = VideoClip::filled(frames, 64, 64, BACKGROUND);
        for t in 0..frames {
            for y in 0..64 {
                for x in 0..64 {
                    let c = reference.get(y, x);
                    let tx = x as i64 + dx + t as i64;
                    if color_distance(c, MASK_FILL) > 0.05 && (0..64).contains(&tx) {
                        clip.set(t, y, tx as usize, c);
                    }
                }
            }
        }
        clip
    }

    #[test]
    fn object_similarity_cases() {
        let e = PatchColorEmbedder::default();
        let shape = Shape::new(ShapeKind::Circle, 0, 7.0, Trajectory::fixed(32.0, 32.0));
        let reference = crate::synth::scene::canonical_crop(&shape, 64, 64).unwrap();
        let right = paste(&reference, 6, -10);
        let det = detect_foreground(&right, None, 0.15);
        let s = object_similarity(&reference, &right, &det, &e).unwrap();
        assert!((s.score.unwrap() - 1.0).abs() < 1e-9);
        let moved = paste(&reference, 6, 12);
        let s2 = object_similarity(&reference, &moved, &detect_foreground(&moved, None, 0.15), &e).unwrap();
        assert!((s2.score.unwrap() - 1.0).abs() < 1e-9);
        let other = Shape { color: 2, ..shape };
        let wrong = paste(&crate::synth::scene::canonical_crop(&other, 64, 64).unwrap(), 6, -10);
        let s3 = object_similarity(&reference, &wrong, &detect_foreground(&wrong, None, 0.15), &e).unwrap();
        assert!(s3.score.unwrap() < s.score.unwrap());
        let empty = VideoClip::filled(6, 64, 64, BACKGROUND);
        let s4 = object_similarity(&reference, &empty, &detect_foreground(&empty, None, 0.15), &e).unwrap();
        assert_eq!((s4.score, s4.detected_frames), (None, 0));
    }

    fn figure_clip(dx: f64, mirror: bool) -> (VideoClip, VideoClip, Vec<crate::synth::Joints>) {
        let mut s = Shape::new(ShapeKind::StickFigure, 8, 16.0, Trajectory::fixed(30.0, 37.0));
        s.motion = Some(FigureMotion::default());
        let spec = SceneSpec { height: 64, width: 64, frames: 6, shapes: vec![s.clone()], seed: 0 };
        let joints: Vec<_> = (0..6).map(|t| figure_joints(30.0, 37.0, 16.0, 1.0, &FigureMotion::default(), t)).collect();
        let pose = render_pose(&joints, 64, 64);
        let mut gen = gen_clip(&spec).unwrap().0;
        if dx != 0.0 {
            s.trajectory = Trajectory::fixed(30.0 + dx, 37.0);
            gen = gen_clip(&SceneSpec { shapes: vec![s], ..spec }).unwrap().0;
        }
        if mirror {
            gen = gen.flip_horizontal();
        }
        (gen, pose, joints)
    }

    #[test]
    fn pose_error_cases() {
        let dec = JointDecoder::default();
        let body = color_rgb(8);
        let (gen, pose, joints) = figure_clip(0.0, false);
        let e = pose_error(&gen, &pose, body, &dec).unwrap();
        assert!(e.mean_px.unwrap() <= 1.0 && e.missing == 0);
        let shifted = pose_error(&figure_clip(4.0, false).0, &pose, body, &dec).unwrap();
        assert!((shifted.mean_px.unwrap() - 4.0).abs() < 1.0, "{shifted:?}");
        // mirroring moves every joint by twice its distance to the vertical center line
        let mirrored = pose_error(&figure_clip(0.0, true).0, &pose, body, &dec).unwrap();
        let expect = joints.iter().flat_map(|j| j.points.iter().map(|p| 2.0 * (p.0 - 32.0).abs())).sum::<f64>() / 48.0;
        assert!((mirrored.mean_px.unwrap() - expect).abs() < 1.5, "{} vs {expect}", mirrored.mean_px.unwrap());
        let blank = pose_error(&VideoClip::filled(6, 64, 64, BACKGROUND), &pose, body, &dec).unwrap();
        assert_eq!((blank.mean_px, blank.missing, blank.total), (None, 48, 48));
        assert_eq!(blank.penalized(32.0), 32.0);
    }

    #[test]
    fn copy_paste_cases() {
        let shape = Shape::new(ShapeKind::Square, 4, 8.0, Trajectory::fixed(32.0, 32.0));
        let reference = crate::synth::scene::canonical_crop(&shape, 64, 64).unwrap();
        let none = vec![false; 64 * 64];
        assert!((copy_paste_score(&reference, &reference, &none).unwrap() - 1.0).abs() < 1e-9);
        let blank = Image::filled(64, 64, BACKGROUND);
        assert_eq!(copy_paste_score(&reference, &blank, &none).unwrap(), 0.0);
        assert!(copy_paste_score(&reference, &blank, &vec![true; 64 * 64]).is_err());
    }
}
