//! GMFV binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                               |
//! |------------|---------------------------------------|
//! | 0..4       | magic `GMFV`                          |
//! | 4..8       | version, `u32` = 1                    |
//! | 8          | rank, `u8` (2 or 3)                   |
//! | 9..12      | zero padding                          |
//! | 12..       | `rank` x `u32` dimensions             |
//! | ..         | row-major `f32` payload               |

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayView, Dimension, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GMFV";
pub const VERSION: u32 = 1;
const FIXED_HEADER: usize = 12;

/// Serializes an array into GMFV bytes.
pub fn encode<D: Dimension>(values: &ArrayView<f32, D>) -> Result<Vec<u8>> {
    let rank = values.ndim();
    if !(2..=3).contains(&rank) {
        return Err(Error::UnsupportedRank(rank as u8));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut out = Vec::with_capacity(FIXED_HEADER + 4 * rank + 4 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(rank as u8);
    out.extend_from_slice(&[0u8; 3]);
    for &dim in values.shape() {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::shape("encode", format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    // iter() walks in logical (row-major) order regardless of memory layout
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses one GMFV record from the front of `bytes`, returning the array and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(ArrayD<f32>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: FIXED_HEADER,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Truncated {
            expected: FIXED_HEADER,
            actual: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rank = bytes[8];
    if !(2..=3).contains(&rank) {
        return Err(Error::UnsupportedRank(rank));
    }
    let header = FIXED_HEADER + 4 * rank as usize;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[FIXED_HEADER..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let total = header + 4 * count;
    if bytes.len() < total {
        return Err(Error::Truncated {
            expected: total,
            actual: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[header..total]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let array = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::shape("decode", e.to_string()))?;
    Ok((array, total))
}

/// Parses a complete GMFV file image; trailing bytes are a size mismatch.
pub fn decode(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let (array, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Truncated {
            expected: used,
            actual: bytes.len(),
        });
    }
    Ok(array)
}

pub fn write_feature_file<D: Dimension>(values: &ArrayView<f32, D>, path: &Path) -> Result<()> {
    let bytes = encode(values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_rank3(path: &Path) -> Result<Array3<f32>> {
    read_feature_file(path)?.into_dimensionality().map_err(|_| {
        Error::shape(
            "read_feature_file",
            format!("{} is not rank 3", path.display()),
        )
    })
}

pub fn read_rank2(path: &Path) -> Result<Array2<f32>> {
    read_feature_file(path)?.into_dimensionality().map_err(|_| {
        Error::shape(
            "read_feature_file",
            format!("{} is not rank 2", path.display()),
        )
    })
}
