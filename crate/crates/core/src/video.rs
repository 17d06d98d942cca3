//! Pixel-space containers: RGB images and clips with values in `[0, 1]`.

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

/// A single RGB frame, row-major `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color);
        }
        Self { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "image buffer of {} values does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Rgb {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: Rgb) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        let mut out = Image::filled(height, width, [0.0; 3]);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// Copy of the rectangle `[y0, y1) x [x0, x1)`.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> Image {
        let mut out = Image::filled(y1 - y0, x1 - x0, [0.0; 3]);
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(y - y0, x - x0, self.get(y, x));
            }
        }
        out
    }
}

/// An RGB video, row-major `(frames, height, width, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn filled(frames: usize, height: usize, width: usize, color: Rgb) -> Self {
        let frame = Image::filled(height, width, color);
        let mut data = Vec::with_capacity(frames * frame.data.len());
        for _ in 0..frames {
            data.extend_from_slice(&frame.data);
        }
        Self { frames, height, width, data }
    }

    pub fn from_vec(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * 3 {
            return Err(Error::shape(format!(
                "clip buffer of {} values does not match {frames}x{height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::shape("cannot build a clip from zero frames"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(frames.len() * h * w * 3);
        for f in frames {
            if f.height != h || f.width != w {
                return Err(Error::shape("frames differ in resolution"));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Self { frames: frames.len(), height: h, width: w, data })
    }

    /// `frames` copies of one image.
    pub fn repeat_image(image: &Image, frames: usize) -> Self {
        let mut data = Vec::with_capacity(frames * image.data.len());
        for _ in 0..frames {
            data.extend_from_slice(&image.data);
        }
        Self { frames, height: image.height, width: image.width, data }
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    #[inline]
    fn offset(&self, t: usize, y: usize, x: usize) -> usize {
        ((t * self.height + y) * self.width + x) * 3
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> Rgb {
        let o = self.offset(t, y, x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, c: Rgb) {
        let o = self.offset(t, y, x);
        self.data[o..o + 3].copy_from_slice(&c);
    }

    pub fn frame(&self, t: usize) -> Image {
        let n = self.frame_len();
        Image { height: self.height, width: self.width, data: self.data[t * n..(t + 1) * n].to_vec() }
    }

    pub fn frames_iter(&self) -> impl Iterator<Item = Image> + '_ {
        (0..self.frames).map(|t| self.frame(t))
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn same_shape(&self, other: &VideoClip) -> bool {
        self.frames == other.frames && self.height == other.height && self.width == other.width
    }

    /// Mirror every frame left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(t, y, self.width - 1 - x, self.get(t, y, x));
                }
            }
        }
        out
    }

    /// Shift content `dx` pixels right (negative: left), filling with `fill`.
    pub fn shift_x(&self, dx: i64, fill: Rgb) -> Self {
        let mut out = VideoClip::filled(self.frames, self.height, self.width, fill);
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    let nx = x as i64 + dx;
                    if nx >= 0 && (nx as usize) < self.width {
                        out.set(t, y, nx as usize, self.get(t, y, x));
                    }
                }
            }
        }
        out
    }
}

/// Per-frame binary mask, `(frames, height, width)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl MaskVideo {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![false; frames * height * width] }
    }

    pub fn full(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![true; frames * height * width] }
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.data[(t * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, v: bool) {
        self.data[(t * self.height + y) * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn frame_count(&self, t: usize) -> usize {
        let n = self.height * self.width;
        self.data[t * n..(t + 1) * n].iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &MaskVideo) -> MaskVideo {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        MaskVideo { data, ..*self }
    }

    pub fn complement(&self) -> MaskVideo {
        MaskVideo { data: self.data.iter().map(|b| !b).collect(), ..*self }
    }

    pub fn contains(&self, other: &MaskVideo) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| *a || !*b)
    }

    /// Tight bounding box `(y0, x0, y1, x1)` (exclusive ends) of frame `t`.
    pub fn bbox(&self, t: usize) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(t, y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Render as a 0/1 RGB clip.
    pub fn to_clip(&self) -> VideoClip {
        let data = self
            .data
            .iter()
            .flat_map(|&b| {
                let v = if b { 1.0 } else { 0.0 };
                [v, v, v]
            })
            .collect();
        VideoClip { frames: self.frames, height: self.height, width: self.width, data }
    }
}
