//! Binary tensor files.
//!
//! Layout: magic `ASFT`, version byte (1), dtype byte (0 = f32 LE), ndim byte
//! (1..=4), `ndim` little-endian u32 dims, then the row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ASFT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const FIXED_HEADER: usize = 7;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(FIXED_HEADER + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::format(path, "file shorter than the tensor header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(Error::format(path, format!("ndim {ndim} outside 1..=4")));
    }
    let dims_end = FIXED_HEADER + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Corruption {
            path: path.into(),
            msg: "truncated dimension table".into(),
        });
    }
    let shape: Vec<usize> = bytes[FIXED_HEADER..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "element count overflows"))?;
    let payload = &bytes[dims_end..];
    if payload.len() != 4 * n {
        return Err(Error::Corruption {
            path: path.into(),
            msg: format!("header declares {n} elements, payload holds {} bytes", payload.len()),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}
