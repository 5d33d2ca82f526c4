//! Tensor blob: `TLAB1`, rank as u32, one u32 per extent, then the elements
//! as little-endian f32 in row-major order. All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use tialab_core::Tensor;

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 5] = b"TLAB1";
pub const MAX_RANK: usize = 8;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * (1 + t.shape().len() + t.numel()));
    write_to(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn write_to<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one blob; `origin` names the source in error messages.
pub fn read_from<R: Read>(r: &mut R, origin: &str) -> Result<Tensor<f32>> {
    let bad = |msg: String| format_err(origin, msg);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|e| bad(format!("missing blob header ({e})")))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {:?}, expected TLAB1", String::from_utf8_lossy(&magic))));
    }
    let rank = read_u32(r).map_err(|e| bad(format!("truncated rank ({e})")))? as usize;
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(|e| bad(format!("truncated extents ({e})")))? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| bad(format!("extents {shape:?} overflow")))?;
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes)
        .map_err(|e| bad(format!("expected {n} elements for shape {shape:?} ({e})")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Decodes a buffer holding exactly one blob.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = bytes;
    let t = read_from(&mut r, "<buffer>")?;
    if !r.is_empty() {
        return Err(format_err("<buffer>", format!("{} trailing bytes after blob", r.len())));
    }
    Ok(t)
}

pub fn save(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(t)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = bytes.as_slice();
    let origin = path.display().to_string();
    let t = read_from(&mut r, &origin)?;
    if !r.is_empty() {
        return Err(format_err(origin, format!("{} trailing bytes after blob", r.len())));
    }
    Ok(t)
}
