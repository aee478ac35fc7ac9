//! The NTF tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [16 bytes] magic "NTENSOR1" padded with NUL bytes
//! [u32]      rank
//! [u32]*rank dims
//! [u8]       dtype code: 0 = f32, 1 = u8, 2 = bool
//! [...]      row-major payload (f32 LE, u8, or one byte per bool)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 16] = *b"NTENSOR1\0\0\0\0\0\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub enum NtfData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    Bool(Vec<bool>),
}

impl NtfData {
    pub fn len(&self) -> usize {
        match self {
            NtfData::F32(v) => v.len(),
            NtfData::U8(v) => v.len(),
            NtfData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            NtfData::F32(_) => 0,
            NtfData::U8(_) => 1,
            NtfData::Bool(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtfTensor {
    pub dims: Vec<usize>,
    pub data: NtfData,
}

impl NtfTensor {
    pub fn new(dims: Vec<usize>, data: NtfData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {expected} elements but payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, NtfData::F32(values))
    }

    pub fn u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(dims, NtfData::U8(values))
    }

    pub fn bool(dims: Vec<usize>, values: Vec<bool>) -> Result<Self> {
        Self::new(dims, NtfData::Bool(values))
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            NtfData::F32(v) => Ok(v),
            other => Err(Error::Shape(format!("expected f32 payload, found dtype code {}", other.code()))),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            NtfData::U8(v) => Ok(v),
            other => Err(Error::Shape(format!("expected u8 payload, found dtype code {}", other.code()))),
        }
    }

    pub fn into_bool(self) -> Result<Vec<bool>> {
        match self.data {
            NtfData::Bool(v) => Ok(v),
            other => Err(Error::Shape(format!("expected bool payload, found dtype code {}", other.code()))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 + 4 * self.dims.len() + 1 + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.data.code());
        match &self.data {
            NtfData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NtfData::U8(v) => out.extend_from_slice(v),
            NtfData::Bool(v) => out.extend(v.iter().map(|&b| b as u8)),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 21 || bytes[..16] != MAGIC {
            return Err("missing NTENSOR1 magic".into());
        }
        let read_u32 = |at: usize| -> std::result::Result<u32, String> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| "truncated header".to_string())
        };
        let rank = read_u32(16)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(read_u32(20 + 4 * i)? as usize);
        }
        let code_at = 20 + 4 * rank;
        let code = *bytes.get(code_at).ok_or("truncated header")?;
        let payload = &bytes[code_at + 1..];
        let count: usize = dims.iter().product();
        let data = match code {
            0 => {
                if payload.len() != 4 * count {
                    return Err(format!("expected {} payload bytes, found {}", 4 * count, payload.len()));
                }
                NtfData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            1 | 2 => {
                if payload.len() != count {
                    return Err(format!("expected {count} payload bytes, found {}", payload.len()));
                }
                if code == 1 {
                    NtfData::U8(payload.to_vec())
                } else {
                    NtfData::Bool(payload.iter().map(|&b| b != 0).collect())
                }
            }
            other => return Err(format!("unknown dtype code {other}")),
        };
        Ok(Self { dims, data })
    }
}

/// Writes a tensor through a temporary sibling file followed by a rename.
pub fn write(path: impl AsRef<Path>, tensor: &NtfTensor) -> Result<()> {
    write_atomic(path.as_ref(), &tensor.to_bytes())
}

pub fn read(path: impl AsRef<Path>) -> Result<NtfTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NtfTensor::from_bytes(&bytes).map_err(|reason| Error::Format {
        path: path.display().to_string(),
        reason,
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
