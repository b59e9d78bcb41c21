//! Binary tensor files.
//!
//! Layout: magic bytes `VTSR`, a u8 rank, `rank` little-endian u32 dims,
//! then the payload as little-endian f32, row-major. Values are truncated
//! to f32 on save and widened back on load, so a save/load/save cycle is
//! byte-identical. Checkpoints, style features, and exported vertex
//! sequences all go through this one reader/writer pair.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"VTSR";

#[derive(Debug, Error)]
pub enum VtsrError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic bytes {found:?}, expected \"VTSR\"")]
    BadMagic { path: String, found: [u8; 4] },
    #[error("{path}: truncated header (rank {rank} needs {need} dim bytes)")]
    TruncatedHeader { path: String, rank: u8, need: usize },
    #[error("{path}: payload holds {found} values but dims {dims:?} require {need}")]
    PayloadMismatch {
        path: String,
        dims: Vec<usize>,
        need: usize,
        found: usize,
    },
    #[error("{path}: dims {dims:?} overflow the addressable element count")]
    DimOverflow { path: String, dims: Vec<u32> },
}

/// Encode into an in-memory buffer. Infallible apart from allocation.
pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let shape = tensor.shape();
    assert!(
        shape.len() <= u8::MAX as usize,
        "tensor rank {} does not fit the u8 rank field",
        shape.len()
    );
    let mut out = Vec::with_capacity(4 + 1 + 4 * shape.len() + 4 * tensor.numel());
    out.extend_from_slice(&MAGIC);
    out.push(shape.len() as u8);
    for &d in shape {
        assert!(d <= u32::MAX as usize, "dimension {d} does not fit u32");
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decode from a byte buffer; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &str) -> Result<Tensor, VtsrError> {
    let mut cursor = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut cursor, &mut magic, path, 0, 0)?;
    if magic != MAGIC {
        return Err(VtsrError::BadMagic {
            path: path.to_string(),
            found: magic,
        });
    }
    let mut rank_byte = [0u8; 1];
    read_exact(&mut cursor, &mut rank_byte, path, 0, 1)?;
    let rank = rank_byte[0];
    let mut dims_raw = vec![0u8; 4 * rank as usize];
    if cursor.read_exact(&mut dims_raw).is_err() {
        return Err(VtsrError::TruncatedHeader {
            path: path.to_string(),
            rank,
            need: 4 * rank as usize,
        });
    }
    let dims_u32: Vec<u32> = dims_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut need: usize = 1;
    for &d in &dims_u32 {
        need = need
            .checked_mul(d as usize)
            .ok_or_else(|| VtsrError::DimOverflow {
                path: path.to_string(),
                dims: dims_u32.clone(),
            })?;
    }
    let found = cursor.len() / 4;
    if cursor.len() != 4 * need {
        return Err(VtsrError::PayloadMismatch {
            path: path.to_string(),
            dims: dims_u32.iter().map(|&d| d as usize).collect(),
            need,
            found,
        });
    }
    let data: Vec<f64> = cursor
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let shape: Vec<usize> = dims_u32.iter().map(|&d| d as usize).collect();
    Ok(Tensor::new(shape, data).expect("length validated against dims"))
}

fn read_exact(
    cursor: &mut &[u8],
    buf: &mut [u8],
    path: &str,
    rank: u8,
    need: usize,
) -> Result<(), VtsrError> {
    cursor.read_exact(buf).map_err(|_| VtsrError::TruncatedHeader {
        path: path.to_string(),
        rank,
        need,
    })
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<(), VtsrError> {
    let bytes = encode(tensor);
    let mut file = fs::File::create(path).map_err(|source| VtsrError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&bytes).map_err(|source| VtsrError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_tensor(path: &Path) -> Result<Tensor, VtsrError> {
    let bytes = fs::read(path).map_err(|source| VtsrError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, &path.display().to_string())
}
