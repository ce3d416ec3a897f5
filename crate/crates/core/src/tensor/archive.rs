//! The `.dtna` tensor archive: a flat named-tensor container.
//!
//! Layout (all integers little-endian):
//!   magic "DTNA" | u32 version = 1 | u32 count
//!   per entry: u16 name_len | name (UTF-8) | u8 dtype (0 = f32, 1 = f64)
//!              | u8 rank | rank × u64 extents | raw little-endian payload
//!
//! Entries are written in ascending name order, so identical maps produce
//! identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"DTNA";
pub const VERSION: u32 = 1;

/// One archived tensor, either dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl ArchiveTensor {
    pub fn dtype(&self) -> DType {
        match self {
            ArchiveTensor::F32(_) => DType::F32,
            ArchiveTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArchiveTensor::F32(t) => t.shape(),
            ArchiveTensor::F64(t) => t.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            ArchiveTensor::F32(t) => t.numel(),
            ArchiveTensor::F64(t) => t.numel(),
        }
    }

    /// Converts to the requested element type (exact when widening).
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            ArchiveTensor::F32(t) => t.cast(),
            ArchiveTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => ArchiveTensor::F32(t.cast()),
            DType::F64 => ArchiveTensor::F64(t.cast()),
        }
    }
}

/// Named tensor map in canonical (name-sorted) order.
pub type Archive = BTreeMap<String, ArchiveTensor>;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic at byte offset {offset}: expected \"DTNA\"")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at byte offset {offset}")]
    BadVersion { version: u32, offset: usize },
    #[error("truncated: needed {needed} bytes at byte offset {offset}, found {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid tensor name at byte offset {offset}: {reason}")]
    BadName { offset: usize, reason: String },
    #[error("duplicate tensor name {name:?} at byte offset {offset}")]
    DuplicateName { name: String, offset: usize },
    #[error("unknown dtype code {code} at byte offset {offset}")]
    BadDType { code: u8, offset: usize },
    #[error("tensor {name:?} at byte offset {offset}: extents overflow")]
    ExtentOverflow { name: String, offset: usize },
    #[error("trailing {extra} bytes after the last entry at byte offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("tensor {name:?} has dtype {found}, expected {expected}")]
    DTypeMismatch {
        name: String,
        found: DType,
        expected: DType,
    },
    #[error("missing tensor {name:?}")]
    Missing { name: String },
}

pub type Result<T> = std::result::Result<T, ArchiveError>;

// ── Encoding ─────────────────────────────────────────────────────────

pub fn to_bytes(tensors: &Archive) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        if name.is_empty() {
            return Err(ArchiveError::BadName {
                offset: buf.len(),
                reason: "empty name".into(),
            });
        }
        if name.len() > u16::MAX as usize {
            return Err(ArchiveError::BadName {
                offset: buf.len(),
                reason: format!("name length {} exceeds u16", name.len()),
            });
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.dtype().code());
        buf.push(tensor.shape().len() as u8);
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match tensor {
            ArchiveTensor::F32(t) => {
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArchiveTensor::F64(t) => {
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(buf)
}

pub fn save(path: &Path, tensors: &Archive) -> Result<()> {
    let bytes = to_bytes(tensors)?;
    std::fs::write(path, bytes).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ── Decoding ─────────────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(ArchiveError::Truncated {
                offset: self.offset,
                needed: n,
                available: self.bytes.len() - self.offset,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader { bytes, offset: 0 };
    let magic_offset = r.offset;
    if r.take(4)? != MAGIC {
        return Err(ArchiveError::BadMagic {
            offset: magic_offset,
        });
    }
    let version_offset = r.offset;
    let version = r.u32()?;
    if version != VERSION {
        return Err(ArchiveError::BadVersion {
            version,
            offset: version_offset,
        });
    }
    let count = r.u32()?;
    let mut out = Archive::new();
    for _ in 0..count {
        let name_offset = r.offset;
        let name_len = r.u16()? as usize;
        if name_len == 0 {
            return Err(ArchiveError::BadName {
                offset: name_offset,
                reason: "empty name".into(),
            });
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| ArchiveError::BadName {
                offset: name_offset,
                reason: e.to_string(),
            })?
            .to_string();
        let dtype_offset = r.offset;
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or(ArchiveError::BadDType {
            code,
            offset: dtype_offset,
        })?;
        let rank = r.u8()? as usize;
        let extents_offset = r.offset;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = r.u64()?;
            let e = usize::try_from(e).map_err(|_| ArchiveError::ExtentOverflow {
                name: name.clone(),
                offset: extents_offset,
            })?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| ArchiveError::ExtentOverflow {
                    name: name.clone(),
                    offset: extents_offset,
                })?;
            shape.push(e);
        }
        let payload = r.take(numel * dtype.size_bytes())?;
        let tensor = match dtype {
            DType::F32 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArchiveTensor::F32(Tensor::new(shape, data).expect("length computed from shape"))
            }
            DType::F64 => {
                let data = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArchiveTensor::F64(Tensor::new(shape, data).expect("length computed from shape"))
            }
        };
        if out.insert(name.clone(), tensor).is_some() {
            return Err(ArchiveError::DuplicateName {
                name,
                offset: name_offset,
            });
        }
    }
    if r.offset != bytes.len() {
        return Err(ArchiveError::TrailingBytes {
            offset: r.offset,
            extra: bytes.len() - r.offset,
        });
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

// ── Single-dtype helpers for parameter maps ──────────────────────────

pub fn save_typed<T: Element>(path: &Path, map: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    let archive: Archive = map
        .iter()
        .map(|(k, v)| (k.clone(), ArchiveTensor::from_tensor(v.clone())))
        .collect();
    save(path, &archive)
}

/// Loads a parameter map, converting every entry to `T` via f64.
pub fn load_typed<T: Element>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let archive = load(path)?;
    Ok(archive
        .into_iter()
        .map(|(k, v)| (k, v.to_tensor()))
        .collect())
}
