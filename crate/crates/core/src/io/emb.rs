//! EMB1 embedding files.
//!
//! Layout (little-endian):
//!
//! | bytes      | content                          |
//! |------------|----------------------------------|
//! | 0..4       | ASCII `EMB1`                     |
//! | 4..8       | `u32` row count `n`              |
//! | 8..12      | `u32` dim `d`                    |
//! | 12..       | `n·d` `f32` values, row-major    |
//!
//! Values are promoted to `f64` on read and rounded to `f32` on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;

pub const MAGIC: &[u8; 4] = b"EMB1";
const HEADER: usize = 12;

pub fn decode_emb1(bytes: &[u8]) -> Result<TokenMatrix> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::FormatError("missing EMB1 magic".into()));
    }
    if bytes.len() < HEADER {
        return Err(Error::FormatError(format!(
            "header needs {HEADER} bytes, found {}",
            bytes.len()
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::FormatError(format!("header {n}x{d} overflows")))?;
    let payload = &bytes[HEADER..];
    if payload.len() < expected {
        return Err(Error::TruncationError {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::FormatError(format!(
            "{} trailing bytes after a {n}x{d} payload",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    TokenMatrix::new(n, d, data)
}

pub fn encode_emb1(m: &TokenMatrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::FormatError("too many rows".into()))?;
    let dim = u32::try_from(m.dim()).map_err(|_| Error::FormatError("dim too large".into()))?;
    let mut out = Vec::with_capacity(HEADER + m.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<TokenMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_emb1(&bytes)
}

pub fn write_embeddings(path: impl AsRef<Path>, m: &TokenMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_emb1(m)?).map_err(|e| Error::io(path, e))
}
