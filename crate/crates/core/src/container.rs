//! Versioned binary container shared by model checkpoints and fitted
//! baseline policies.
//!
//! ```text
//! magic     8 bytes   "SELDEFER"
//! version   u32 LE
//! hdr_len   u64 LE
//! header    hdr_len bytes of UTF-8 JSON
//! tensors   f64 LE, concatenated in header declaration order
//! ```
//!
//! The header carries `kind`, the tensor table (`name`, `shape`) and a
//! free-form `meta` object owned by the payload type.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SELDEFER";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    tensors: Vec<TensorInfo>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(TensorInfo, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((
            TensorInfo {
                name: name.to_string(),
                shape: shape.to_vec(),
            },
            data.to_vec(),
        ));
    }

    pub fn tensor(&self, name: &str) -> Result<&(TensorInfo, Vec<f64>)> {
        self.tensors
            .iter()
            .find(|(info, _)| info.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            tensors: self.tensors.iter().map(|(i, _)| i.clone()).collect(),
            meta: self.meta.clone(),
        };
        let hdr = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n: usize = self.tensors.iter().map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(20 + hdr.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hdr.len() as u64).to_le_bytes());
        out.extend_from_slice(&hdr);
        for (_, data) in &self.tensors {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(format!("corrupt container: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hdr_len {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hdr_len]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let data = &body[hdr_len..];
        let expected: usize = header.tensors.iter().map(|t| t.len() * 8).sum();
        if data.len() != expected {
            return Err(corrupt(&format!(
                "tensor section has {} bytes, header declares {expected}",
                data.len()
            )));
        }
        let mut offset = 0;
        let tensors = header
            .tensors
            .into_iter()
            .map(|info| {
                let n = info.len();
                let values = data[offset..offset + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                offset += 8 * n;
                (info, values)
            })
            .collect();
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} container, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}
