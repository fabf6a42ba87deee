//! Tensor bundles: a length-prefixed JSON manifest followed by an aligned
//! little-endian payload.
//!
//! ```text
//! [u64 LE: header length H][H bytes: JSON manifest, space padded][blob]
//! ```
//!
//! `8 + H` is a multiple of 8. Every tensor is a row-major 2-D array stored at
//! `offset` bytes from the start of the blob; offsets are multiples of 8 and
//! tensors never overlap. Writers place tensors in name order with zero
//! padding between them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    tensors: BTreeMap<String, (Matrix, DType)>,
    metadata: BTreeMap<String, serde_json::Value>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.insert_as(name, value, DType::F64);
    }

    /// Values stored as `F32` are rounded when written.
    pub fn insert_as(&mut self, name: impl Into<String>, value: Matrix, dtype: DType) {
        self.tensors.insert(name.into(), (value, dtype));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name).map(|(m, _)| m)
    }

    pub fn dtype(&self, name: &str) -> Option<DType> {
        self.tensors.get(name).map(|(_, d)| *d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Stores every tensor in the given precision.
    pub fn set_dtype(&mut self, dtype: DType) {
        for entry in self.tensors.values_mut() {
            entry.1 = dtype;
        }
    }

    pub fn metadata(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: serde_json::Value) {
        self.metadata.insert(key.into(), value);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = BTreeMap::new();
        let mut offset = 0usize;
        for (name, (m, dtype)) in &self.tensors {
            let length = m.rows() * m.cols() * dtype.size();
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: *dtype,
                    shape: vec![m.rows(), m.cols()],
                    offset: offset as u64,
                    length: length as u64,
                },
            );
            offset = align8(offset + length);
        }
        let manifest = BundleManifest {
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let mut header = serde_json::to_vec(&manifest).expect("manifest serializes");
        header.resize(align8(8 + header.len()) - 8, b' ');

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let blob_start = out.len();
        for (m, dtype) in self.tensors.values() {
            match dtype {
                DType::F64 => m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => m
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
            out.resize(blob_start + align8(out.len() - blob_start), 0);
        }
        out
    }

    /// Parses and validates a bundle. `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        if bytes.len() < 8 {
            return Err(bad(format!("truncated: {} bytes, no header length", bytes.len())));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let blob_start = 8u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| bad(format!("truncated: header of {header_len} bytes declared, file has {}", bytes.len())))?
            as usize;
        if blob_start % 8 != 0 {
            return Err(bad(format!("header length {header_len} leaves the payload unaligned")));
        }
        let manifest: BundleManifest = serde_json::from_slice(&bytes[8..blob_start])
            .map_err(|e| bad(format!("invalid manifest: {e}")))?;
        let blob = &bytes[blob_start..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            let &[rows, cols] = entry.shape.as_slice() else {
                return Err(bad(format!("tensor '{name}' has shape {:?}; only 2-D tensors are supported", entry.shape)));
            };
            if rows == 0 || cols == 0 {
                return Err(bad(format!("tensor '{name}' has an empty dimension")));
            }
            let expected = (rows as u64)
                .checked_mul(cols as u64)
                .and_then(|n| n.checked_mul(entry.dtype.size() as u64));
            if expected != Some(entry.length) {
                return Err(bad(format!(
                    "tensor '{name}': length {} does not match shape {rows}x{cols} of {:?}",
                    entry.length, entry.dtype
                )));
            }
            if entry.offset % 8 != 0 {
                return Err(bad(format!("tensor '{name}': offset {} is not 8-byte aligned", entry.offset)));
            }
            let end = entry
                .offset
                .checked_add(entry.length)
                .filter(|&e| e <= blob.len() as u64)
                .ok_or_else(|| {
                    bad(format!(
                        "truncated: tensor '{name}' ends past the payload ({} bytes)",
                        blob.len()
                    ))
                })?;
            spans.push((entry.offset, end, name));
            let raw = &blob[entry.offset as usize..end as usize];
            let data: Vec<f64> = match entry.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor '{name}' contains non-finite values")));
            }
            let m = Matrix::new(rows, cols, data).map_err(|e| bad(e.to_string()))?;
            tensors.insert(name.clone(), (m, entry.dtype));
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(bad(format!("tensors '{}' and '{}' overlap", pair[0].2, pair[1].2)));
            }
        }
        let used = spans.last().map_or(0, |s| align8(s.1 as usize));
        if blob.len() > used {
            return Err(bad(format!("{} unexpected bytes after the last tensor", blob.len() - used)));
        }
        Ok(Self {
            tensors,
            metadata: manifest.metadata,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn require(&self, name: &str, origin: &Path) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::format(origin, format!("missing tensor '{name}'")))
    }

    pub fn metadata_str(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).and_then(|v| v.as_str())
    }
}
