//! `MGF1` binary blobs.
//!
//! Layout: 16-byte header (`MGF1`, rows: u32 LE, dim: u32 LE, reserved: u32 LE)
//! followed by a row-major little-endian payload. Feature files always carry
//! reserved = 0 and an `f32` payload. Checkpoints and graph caches reuse the
//! header and tag the payload kind in the reserved word.

use std::fs;
use std::path::Path;

use crate::error::{MagnetError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MGF1";
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum PayloadKind {
    F32 = 0,
    F64 = 1,
    /// `(u32 index, f32 score)` pairs; padding slots hold index `u32::MAX`.
    IndexScore = 2,
}

impl PayloadKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            2 => Some(Self::IndexScore),
            _ => None,
        }
    }

    fn entry_bytes(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 | Self::IndexScore => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub rows: usize,
    pub dim: usize,
    pub kind: PayloadKind,
}

pub fn encode_header(h: Header) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.rows as u32).to_le_bytes());
    out.extend_from_slice(&(h.dim as u32).to_le_bytes());
    out.extend_from_slice(&(h.kind as u32).to_le_bytes());
    out
}

/// Parses and length-checks a blob, returning the header and payload slice.
pub fn decode<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Header, &'a [u8])> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(MagnetError::BadMagic(path.to_path_buf()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
    let kind = PayloadKind::from_u32(word(3))
        .ok_or_else(|| MagnetError::Shape(format!("{}: unknown payload kind {}", path.display(), word(3))))?;
    let header = Header {
        rows: word(1) as usize,
        dim: word(2) as usize,
        kind,
    };
    let expected = header.rows * header.dim * kind.entry_bytes();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(MagnetError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(MagnetError::Shape(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            payload.len() - expected
        )));
    }
    Ok((header, payload))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MagnetError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MagnetError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| MagnetError::io(path, e))
}

/// Serializes an `f32` matrix (the feature-file layout).
pub fn encode_f32(rows: usize, dim: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(rows * dim, values.len());
    let mut out = encode_header(Header {
        rows,
        dim,
        kind: PayloadKind::F32,
    });
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serializes a matrix at its native precision, lossless for `f32` and `f64`.
pub fn encode_matrix<T: Scalar>(m: &Matrix<T>) -> Vec<u8> {
    let kind = if T::BYTES == 4 { PayloadKind::F32 } else { PayloadKind::F64 };
    let mut out = encode_header(Header {
        rows: m.rows(),
        dim: m.cols(),
        kind,
    });
    out.reserve(m.len() * T::BYTES);
    for &v in m.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode_matrix<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Matrix<T>> {
    let (h, payload) = decode(path, bytes)?;
    let data: Vec<T> = match h.kind {
        PayloadKind::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        PayloadKind::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        PayloadKind::IndexScore => {
            return Err(MagnetError::Shape(format!("{}: expected a real matrix", path.display())))
        }
    };
    Ok(Matrix::from_vec(h.rows, h.dim, data))
}

/// Serializes ragged `(index, score)` lists padded to `width` slots per row.
pub fn encode_index_lists(width: usize, lists: &[Vec<(usize, f64)>]) -> Vec<u8> {
    let mut out = encode_header(Header {
        rows: lists.len(),
        dim: width,
        kind: PayloadKind::IndexScore,
    });
    for list in lists {
        assert!(list.len() <= width, "list longer than width");
        for slot in 0..width {
            let (idx, score) = list.get(slot).map_or((u32::MAX, 0.0f32), |&(i, s)| (i as u32, s as f32));
            out.extend_from_slice(&idx.to_le_bytes());
            out.extend_from_slice(&score.to_le_bytes());
        }
    }
    out
}

/// Per-row `(index, score)` lists.
pub type IndexLists = Vec<Vec<(usize, f32)>>;

pub fn decode_index_lists(path: &Path, bytes: &[u8]) -> Result<(usize, IndexLists)> {
    let (h, payload) = decode(path, bytes)?;
    if h.kind != PayloadKind::IndexScore {
        return Err(MagnetError::Shape(format!("{}: expected index lists", path.display())));
    }
    let mut lists = Vec::with_capacity(h.rows);
    for row in payload.chunks_exact(8 * h.dim.max(1)).take(h.rows) {
        let list = row
            .chunks_exact(8)
            .map(|c| {
                let idx = u32::from_le_bytes(c[..4].try_into().unwrap());
                let score = f32::from_le_bytes(c[4..].try_into().unwrap());
                (idx, score)
            })
            .take_while(|&(idx, _)| idx != u32::MAX)
            .map(|(idx, score)| (idx as usize, score))
            .collect();
        lists.push(list);
    }
    if h.dim == 0 {
        lists = vec![Vec::new(); h.rows];
    }
    Ok((h.dim, lists))
}
