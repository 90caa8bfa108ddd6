//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes   "SCAT"
//! version  u32       1
//! ndim     u32       >= 1
//! dims     ndim x u64
//! payload  product(dims) x f32 (IEEE-754, little-endian)
//! ```
//!
//! Values are narrowed from `f64` to `f32` on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCAT";
pub const VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(Error::TensorFormat("refusing to write non-finite values".into()));
    }
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::TensorFormat(format!("truncated at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(Error::TensorFormat("bad magic".into()));
    }
    let u32_at = |pos: &mut usize| -> Result<u32> { Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap())) };
    let version = u32_at(&mut pos)?;
    if version != VERSION {
        return Err(Error::TensorFormat(format!("unsupported version {version}")));
    }
    let ndim = u32_at(&mut pos)? as usize;
    if ndim == 0 {
        return Err(Error::TensorFormat("ndim must be at least 1".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
        let d = usize::try_from(d)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::TensorFormat(format!("invalid dimension {d}")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::TensorFormat("dimension product overflows".into()))?;
        dims.push(d);
    }
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::TensorFormat("payload too large".into()))?;
    let payload = take(bytes, &mut pos, payload_len).map_err(|_| {
        Error::TensorFormat(format!(
            "payload length mismatch: need {payload_len} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ))
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Tensor::from_vec(&dims, data)?, pos))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::TensorFormat(format!(
            "{} trailing bytes after payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
