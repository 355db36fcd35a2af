//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NICOCKP\0"
//! version    u32      currently 1
//! meta_len   u32      length of the JSON header
//! meta       bytes    caller-defined JSON (model config, stage, counters)
//! n_blocks   u32
//! per block:
//!   name_len u16, name bytes (UTF-8)
//!   rows u32, cols u32
//!   flags u8          bit 0: Adam moments present
//!   values rows·cols f64
//!   [moment1, moment2 same length when flagged]
//! ```
//!
//! Floats are written bit-exactly, so save → load round-trips reproduce the
//! model and optimizer state precisely.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

use super::Parameter;

const MAGIC: &[u8; 8] = b"NICOCKP\0";
const VERSION: u32 = 1;

/// One named tensor with optional optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockData {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub moment1: Option<Vec<f64>>,
    pub moment2: Option<Vec<f64>>,
}

impl BlockData {
    pub fn from_parameter(p: &Parameter, with_moments: bool) -> Self {
        Self {
            name: p.name.clone(),
            rows: p.rows(),
            cols: p.cols(),
            values: p.value.iter().copied().collect(),
            moment1: with_moments.then(|| p.moment1.iter().copied().collect()),
            moment2: with_moments.then(|| p.moment2.iter().copied().collect()),
        }
    }

    /// Load this block into a parameter of matching name and shape.
    pub fn apply_to(&self, p: &mut Parameter) -> Result<()> {
        if p.name != self.name || p.rows() != self.rows || p.cols() != self.cols {
            return Err(Error::Checkpoint(format!(
                "block `{}` ({}×{}) does not match parameter `{}` ({}×{})",
                self.name,
                self.rows,
                self.cols,
                p.name,
                p.rows(),
                p.cols()
            )));
        }
        for (dst, &src) in p.value.iter_mut().zip(&self.values) {
            *dst = src;
        }
        if let Some(m1) = &self.moment1 {
            for (dst, &src) in p.moment1.iter_mut().zip(m1) {
                *dst = src;
            }
        }
        if let Some(m2) = &self.moment2 {
            for (dst, &src) in p.moment2.iter_mut().zip(m2) {
                *dst = src;
            }
        }
        Ok(())
    }
}

pub fn write_checkpoint<M: Serialize>(
    path: impl AsRef<Path>,
    meta: &M,
    blocks: &[BlockData],
) -> Result<()> {
    let meta_bytes =
        serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for b in blocks {
        let name = b.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("block name too long: {}", b.name)));
        }
        if b.values.len() != b.rows * b.cols {
            return Err(Error::Checkpoint(format!(
                "block `{}` holds {} values for shape {}×{}",
                b.name,
                b.values.len(),
                b.rows,
                b.cols
            )));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(b.rows as u32).to_le_bytes())?;
        w.write_all(&(b.cols as u32).to_le_bytes())?;
        let has_moments = b.moment1.is_some() && b.moment2.is_some();
        w.write_all(&[u8::from(has_moments)])?;
        write_f64s(&mut w, &b.values)?;
        if has_moments {
            write_f64s(&mut w, b.moment1.as_ref().unwrap())?;
            write_f64s(&mut w, b.moment2.as_ref().unwrap())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<M: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(M, Vec<BlockData>)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open `{}`: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_bytes)?;
    let meta: M = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;

    let n_blocks = read_u32(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| {
            Error::Checkpoint(format!("block `{name}` shape overflows"))
        })?;
        let mut flags = [0u8; 1];
        read_exact(&mut r, &mut flags)?;
        let values = read_f64s(&mut r, count)?;
        let (moment1, moment2) = if flags[0] & 1 != 0 {
            (Some(read_f64s(&mut r, count)?), Some(read_f64s(&mut r, count)?))
        } else {
            (None, None)
        };
        blocks.push(BlockData { name, rows, cols, values, moment1, moment2 });
    }
    Ok((meta, blocks))
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}
