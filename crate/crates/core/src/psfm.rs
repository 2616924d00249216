//! The PSFM float32 block layout shared by feature files, dictionary
//! sidecars, checkpoints and the remote-backend wire protocol.
//!
//! ```text
//! "PSFM" | u8 version = 1 | u32 grid_h | u32 grid_w | u32 dim | f32 × (h·w·dim)
//! ```
//! All integers and floats are little-endian; values are row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSFM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 * 3;

/// A decoded block, before any domain validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub grid_h: u32,
    pub grid_w: u32,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl Block {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid_h * grid_w * dim {
            return Err(Error::Validation(format!(
                "block data length {} does not match {grid_h}x{grid_w}x{dim}",
                data.len()
            )));
        }
        let to_u32 = |v: usize| {
            u32::try_from(v).map_err(|_| Error::Validation(format!("dimension {v} exceeds u32")))
        };
        Ok(Self {
            grid_h: to_u32(grid_h)?,
            grid_w: to_u32(grid_w)?,
            dim: to_u32(dim)?,
            data,
        })
    }

    /// A `rows × cols` matrix stored as a `rows × 1 × cols` block.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(rows, 1, cols, data)
    }

    pub fn element_count(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize * self.dim as usize
    }
}

pub fn encode(block: &Block) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + block.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&block.grid_h.to_le_bytes());
    out.extend_from_slice(&block.grid_w.to_le_bytes());
    out.extend_from_slice(&block.dim.to_le_bytes());
    for v in &block.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Block> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PSFM magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported PSFM version {}", bytes[4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption("truncated PSFM header".into()));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let (grid_h, grid_w, dim) = (read_u32(5), read_u32(9), read_u32(13));
    let count = (grid_h as u64) * (grid_w as u64) * (dim as u64);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != count * 4 {
        return Err(Error::Corruption(format!(
            "payload holds {} bytes, header {grid_h}x{grid_w}x{dim} needs {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Block {
        grid_h,
        grid_w,
        dim,
        data,
    })
}

pub fn write_block(path: &Path, block: &Block) -> Result<()> {
    fs::write(path, encode(block)).map_err(|e| Error::io(path, e))
}

pub fn read_block(path: &Path) -> Result<Block> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
