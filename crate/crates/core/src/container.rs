//! `MDAR` array container.
//!
//! Layout: the four bytes `MDAR`, a version byte (1), a rank byte, one
//! little-endian `u32` per dimension, then the row-major `f32` payload in
//! little-endian order. Nothing follows the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"MDAR";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(u8::try_from(t.ndim()).expect("rank fits in a byte"));
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("dimension fits in u32").to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Container {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing MDAR magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let payload = &bytes[header..];
    if Some(payload.len()) != n.checked_mul(4) {
        return Err(bad(format!("payload is {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
