//! Pooled image features: `"UMFEAT01"`, row count (u32 LE), dimension
//! (u32 LE), then `rows·dim` little-endian `f32` values, row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{read_bytes, write_atomic};

pub const FEATURE_MAGIC: &[u8; 8] = b"UMFEAT01";
const HEADER: usize = 16;

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let (rows, dim) = features.dims2("features")?;
    let mut out = Vec::with_capacity(HEADER + rows * dim * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&u32::try_from(rows).map_err(|_| Error::invalid("too many rows"))?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(dim).map_err(|_| Error::invalid("dimension too large"))?.to_le_bytes());
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature file into an `f64` matrix (`rows × dim`).
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a UMFEAT01 feature file"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if rows == 0 || dim == 0 {
        return Err(Error::format(path, "feature file declares zero rows or zero dimension"));
    }
    let want = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "feature header overflows"))?;
    let payload = &bytes[HEADER..];
    if payload.len() != want {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {want}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![rows, dim], data)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode_features(&read_bytes(path)?, path)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    write_atomic(path, &encode_features(features)?)
}
