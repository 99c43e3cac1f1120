//! Binary tensor container: 8-byte magic, little-endian u32 header length, JSON header,
//! raw little-endian payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TNSR0001";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        };
        if n != len {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> &'static str {
        match self.data {
            TensorData::F32(_) => "f32",
            TensorData::U8(_) => "u8",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            dtype: self.dtype().to_string(),
            shape: self.shape.clone(),
            order: "row-major".to_string(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    fn payload_len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::U8(v) => v.len(),
        }
    }

    /// Parses a tensor; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptTensor {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 12 {
            return Err(corrupt(format!("file is {} bytes, shorter than the fixed prefix", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(corrupt(format!("header length {hlen} exceeds file size")));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.order != "row-major" {
            return Err(corrupt(format!("unsupported order {:?}", header.order)));
        }
        let n = header
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt("shape overflows".into()))?;
        let payload = &body[hlen..];
        let data = match header.dtype.as_str() {
            "f32" => {
                if Some(payload.len()) != n.checked_mul(4) {
                    return Err(corrupt(format!("payload is {} bytes, expected {} f32 values", payload.len(), n)));
                }
                TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            }
            "u8" => {
                if payload.len() != n {
                    return Err(corrupt(format!("payload is {} bytes, expected {n}", payload.len())));
                }
                TensorData::U8(payload.to_vec())
            }
            other => return Err(corrupt(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self {
            shape: header.shape,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// f32 payload with the expected rank, or a `CorruptTensor` naming `path`.
    pub fn expect_f32(&self, rank: usize, path: &Path) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) if self.shape.len() == rank => Ok(v),
            _ => Err(Error::CorruptTensor {
                path: path.to_path_buf(),
                reason: format!("expected rank-{rank} f32, got {} {:?}", self.dtype(), self.shape),
            }),
        }
    }

    pub fn expect_u8(&self, rank: usize, path: &Path) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) if self.shape.len() == rank => Ok(v),
            _ => Err(Error::CorruptTensor {
                path: path.to_path_buf(),
                reason: format!("expected rank-{rank} u8, got {} {:?}", self.dtype(), self.shape),
            }),
        }
    }
}
