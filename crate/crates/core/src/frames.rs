//! PNG frame grids for inspecting clips.

use std::path::Path;

use crate::error::Result;
use crate::video::VideoClip;

/// All frames side by side in one row, 8-bit RGB.
pub fn write_frame_grid(path: &Path, clip: &VideoClip) -> Result<()> {
    let (h, w) = (clip.height, clip.width);
    let row = w * clip.frames;
    let mut buf = vec![0u8; h * row * 3];
    for t in 0..clip.frames {
        for y in 0..h {
            for x in 0..w {
                let c = clip.get(t, y, x);
                let o = (y * row + t * w + x) * 3;
                for k in 0..3 {
                    buf[o + k] = (c[k].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, row as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(&buf)?;
    Ok(())
}
