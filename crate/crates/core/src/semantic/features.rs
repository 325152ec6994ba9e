//! Per-frame region features and their `.ofrf` wire format.
//!
//! Layout (little-endian): magic `OFRF`, `u32` version (1), `u64` frame id,
//! `u32` region count `n`, `u32` embedding dim `d`, `u32` map height,
//! `u32` map width, then `n*d` `f32` embeddings row-major, then `n*h*w` `f32`
//! confidences row-major.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"OFRF";
pub const FEATURE_VERSION: u32 = 1;

const NORM_TOLERANCE: f32 = 1e-4;

/// Region confidence maps and embeddings for one frame, at map resolution
/// `width x height` (a fraction of the camera resolution).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet {
    pub frame_id: u64,
    dim: usize,
    width: usize,
    height: usize,
    embeddings: Vec<f32>,
    confidences: Vec<f32>,
}

impl RegionFeatureSet {
    /// Validates value ranges and normalizes any embedding whose norm is not
    /// already 1 within 1e-4.
    pub fn new(
        frame_id: u64,
        dim: usize,
        width: usize,
        height: usize,
        mut embeddings: Vec<f32>,
        confidences: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 && !embeddings.is_empty() {
            return Err(Error::invalid("zero embedding dimension with non-empty embeddings"));
        }
        let n = if dim == 0 { 0 } else { embeddings.len() / dim };
        if n * dim != embeddings.len() {
            return Err(Error::invalid(format!(
                "embedding buffer of {} floats is not a multiple of d={dim}",
                embeddings.len()
            )));
        }
        if confidences.len() != n * width * height {
            return Err(Error::invalid(format!(
                "expected {} confidences for {n} regions of {width}x{height}, got {}",
                n * width * height,
                confidences.len()
            )));
        }
        if let Some(bad) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid(format!("confidence {bad} outside [0, 1]")));
        }
        for (i, row) in embeddings.chunks_mut(dim.max(1)).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::invalid(format!("embedding {i} has zero or non-finite norm")));
            }
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Ok(Self {
            frame_id,
            dim,
            width,
            height,
            embeddings,
            confidences,
        })
    }

    pub fn empty(frame_id: u64, dim: usize, width: usize, height: usize) -> Self {
        Self {
            frame_id,
            dim,
            width,
            height,
            embeddings: Vec::new(),
            confidences: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.embeddings.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn map(&self, i: usize) -> &[f32] {
        let px = self.width * self.height;
        &self.confidences[i * px..(i + 1) * px]
    }

    pub fn encode(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(FEATURE_MAGIC)?;
        out.write_u32::<LE>(FEATURE_VERSION)?;
        out.write_u64::<LE>(self.frame_id)?;
        out.write_u32::<LE>(self.len() as u32)?;
        out.write_u32::<LE>(self.dim as u32)?;
        out.write_u32::<LE>(self.height as u32)?;
        out.write_u32::<LE>(self.width as u32)?;
        for &x in self.embeddings.iter().chain(&self.confidences) {
            out.write_f32::<LE>(x)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + 4 * (self.embeddings.len() + self.confidences.len()));
        self.encode(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn decode(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::format("ofrf", format!("bad magic {magic:?}")));
        }
        let version = input.read_u32::<LE>()?;
        if version != FEATURE_VERSION {
            return Err(Error::format("ofrf", format!("unsupported version {version}")));
        }
        let frame_id = input.read_u64::<LE>()?;
        let n = input.read_u32::<LE>()? as usize;
        let dim = input.read_u32::<LE>()? as usize;
        let height = input.read_u32::<LE>()? as usize;
        let width = input.read_u32::<LE>()? as usize;
        let mut embeddings = vec![0f32; n * dim];
        input.read_f32_into::<LE>(&mut embeddings)?;
        let mut confidences = vec![0f32; n * width * height];
        input.read_f32_into::<LE>(&mut confidences)?;
        Self::new(frame_id, dim, width, height, embeddings, confidences)
            .map_err(|e| Error::format("ofrf", e.to_string()))
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::decode(&mut bytes)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// `<dir>/<frame_id>.ofrf`
pub fn feature_path(dir: &Path, frame_id: u64) -> std::path::PathBuf {
    dir.join(format!("{frame_id}.ofrf"))
}
