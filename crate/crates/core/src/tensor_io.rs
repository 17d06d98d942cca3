//! Flat binary tensor files.
//!
//! Layout (little endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"VFT1"
//! 4       1     dtype  (1 = f32)
//! 5       3     reserved, zero
//! 8       16    dims   4 x u32
//! 24      ...   data   dims product x f32
//! ```
//!
//! Every tensor file may carry a sidecar `<file>.meta` holding one JSON
//! record (codec config, seed, free-form fields).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::video::VideoClip;

pub const MAGIC: &[u8; 4] = b"VFT1";
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F32);
        out.extend_from_slice(&[0, 0, 0]);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::TensorFile { path: path.to_path_buf(), msg: msg.to_string() };
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != DTYPE_F32 {
            return Err(bad(&format!("unsupported dtype tag {}", bytes[4])));
        }
        let mut dims = [0usize; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            let o = 8 + 4 * k;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        }
        let n: usize = dims.iter().product();
        if bytes.len() != HEADER_LEN + 4 * n {
            return Err(bad(&format!("expected {} data bytes, found {}", 4 * n, bytes.len() - HEADER_LEN)));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_tensor(path: &Path, t: &RawTensor, meta: Option<&serde_json::Value>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&t.to_bytes())?;
    if let Some(meta) = meta {
        fs::write(meta_path(path), serde_json::to_string(meta)? + "\n")?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    RawTensor::from_bytes(&bytes, path)
}

pub fn read_meta(path: &Path) -> Result<Option<serde_json::Value>> {
    let p = meta_path(path);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
}

impl From<&VideoClip> for RawTensor {
    fn from(c: &VideoClip) -> Self {
        RawTensor { dims: [c.frames, c.height, c.width, 3], data: c.data.clone() }
    }
}

impl TryFrom<RawTensor> for VideoClip {
    type Error = Error;

    fn try_from(t: RawTensor) -> Result<Self> {
        if t.dims[3] != 3 {
            return Err(Error::shape(format!("clip tensor must have 3 channels, found {}", t.dims[3])));
        }
        VideoClip::from_vec(t.dims[0], t.dims[1], t.dims[2], t.data)
    }
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    write_tensor(path, &RawTensor::from(clip), None)
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    read_tensor(path)?.try_into()
}
