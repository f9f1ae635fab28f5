//! MSEG-W1 named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "MSEGW1\0\0"
//! offset 8   8 bytes   u64 header length H
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          payload: f32 LE values, entries packed in header order
//! ```
//!
//! The header is `{"format":"MSEG-W1","entries":[{"name","shape","dtype","offset"}...]}`
//! where `offset` is the byte offset of the entry inside the payload. Offsets are
//! 4-byte aligned and packed without gaps or overlap, so the payload length is
//! exactly `4 · Σ numel`.

use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

pub const MAGIC: &[u8; 8] = b"MSEGW1\0\0";
const FORMAT_TAG: &str = "MSEG-W1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WeightFormatError {
    #[error("bad magic: not an MSEG-W1 file")]
    BadMagic,
    #[error("truncated header: need {needed} bytes, file has {available}")]
    TruncatedHeader { needed: u64, available: u64 },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("entry `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("entry `{name}`: offset {offset} is not 4-byte aligned")]
    Misaligned { name: String, offset: u64 },
    #[error("entry `{name}`: offset {offset} overlaps the previous entry ending at {prev_end}")]
    OverlappingOffsets {
        name: String,
        offset: u64,
        prev_end: u64,
    },
    #[error("entry `{name}`: gap between previous entry end {prev_end} and offset {offset}")]
    Gap {
        name: String,
        offset: u64,
        prev_end: u64,
    },
    #[error("truncated payload: header describes {expected} bytes, file has {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("payload has {extra} trailing bytes beyond the described entries")]
    TrailingBytes { extra: u64 },
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// One stored tensor: arbitrary-rank shape plus `f32` values.
#[derive(Clone, Debug)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "weight store",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(StoredTensor { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Right-aligned NCHW view (a `[c]` vector becomes `1×1×1×c`).
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor4<T>> {
        let shape = Shape4::from_dims(&self.shape).ok_or_else(|| {
            Error::shape(
                "weight store",
                format!("rank {} tensor has no NCHW view", self.shape.len()),
            )
        })?;
        Tensor4::new(
            shape,
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Ordered named-tensor container backing a graph.
#[derive(Clone, Debug, Default)]
pub struct WeightStore {
    entries: IndexMap<String, StoredTensor>,
}

/// Bitwise equality: entry order, names, shapes and every value's bit pattern.
impl PartialEq for WeightStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bits_eq(b))
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn insert_tensor<T: Element>(&mut self, name: impl Into<String>, shape: Vec<usize>, t: &Tensor4<T>) -> Result<()> {
        let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
        self.insert(name, StoredTensor::new(shape, data)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut StoredTensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of stored scalars.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(StoredTensor::numel).sum()
    }

    /// Converts every entry into a shared NCHW tensor of element type `T`.
    pub fn to_params<T: Element>(&self) -> Result<ParamMap<T>> {
        self.entries
            .iter()
            .map(|(k, v)| Ok((k.clone(), Arc::new(v.to_tensor::<T>()?))))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = HeaderEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format: FORMAT_TAG.into(),
            entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.entries.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightFormatError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(WeightFormatError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(WeightFormatError::TruncatedHeader {
                needed: 16,
                available: bytes.len() as u64,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = 16u64.saturating_add(hlen);
        if (bytes.len() as u64) < payload_start {
            return Err(WeightFormatError::TruncatedHeader {
                needed: payload_start,
                available: bytes.len() as u64,
            });
        }
        let header: Header = serde_json::from_slice(&bytes[16..payload_start as usize])
            .map_err(|e| WeightFormatError::BadHeader(e.to_string()))?;
        if header.format != FORMAT_TAG {
            return Err(WeightFormatError::BadHeader(format!(
                "format tag `{}`",
                header.format
            )));
        }
        let payload = &bytes[payload_start as usize..];
        let mut store = WeightStore::new();
        let mut prev_end = 0u64;
        for e in header.entries {
            if e.dtype != "f32" {
                return Err(WeightFormatError::UnsupportedDtype {
                    name: e.name,
                    dtype: e.dtype,
                });
            }
            if e.offset % 4 != 0 {
                return Err(WeightFormatError::Misaligned {
                    name: e.name,
                    offset: e.offset,
                });
            }
            if e.offset < prev_end {
                return Err(WeightFormatError::OverlappingOffsets {
                    name: e.name,
                    offset: e.offset,
                    prev_end,
                });
            }
            if e.offset > prev_end {
                return Err(WeightFormatError::Gap {
                    name: e.name,
                    offset: e.offset,
                    prev_end,
                });
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| WeightFormatError::BadHeader(format!("shape overflow in `{}`", e.name)))?;
            let end = e.offset + 4 * numel;
            if end > payload.len() as u64 {
                return Err(WeightFormatError::TruncatedPayload {
                    expected: end,
                    actual: payload.len() as u64,
                });
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if store.entries.contains_key(&e.name) {
                return Err(WeightFormatError::DuplicateName(e.name));
            }
            store.entries.insert(e.name, StoredTensor { shape: e.shape, data });
            prev_end = end;
        }
        if (payload.len() as u64) > prev_end {
            return Err(WeightFormatError::TrailingBytes {
                extra: payload.len() as u64 - prev_end,
            });
        }
        Ok(store)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Name → shared tensor map used by the graph executor.
pub type ParamMap<T> = IndexMap<String, Arc<Tensor4<T>>>;

#[cfg(test)]
mod tests {
    use super::*;

    fn header_len(bytes: &[u8]) -> usize {
        u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
    }

    #[test]
    fn empty_store_round_trips() {
        let s = WeightStore::new();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 16 + header_len(&bytes));
        assert_eq!(WeightStore::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn single_tensor_file_size() {
        let mut s = WeightStore::new();
        s.insert("w", StoredTensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, f32::MIN_POSITIVE]).unwrap());
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 16 + header_len(&bytes) + 16);
        assert_eq!(&bytes[bytes.len() - 16..bytes.len() - 12], &1.0f32.to_le_bytes());
        assert_eq!(WeightStore::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn distinct_errors() {
        let mut s = WeightStore::new();
        s.insert("a", StoredTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        s.insert("b", StoredTensor::new(vec![1], vec![4.0]).unwrap());
        let bytes = s.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(WeightStore::from_bytes(&bad), Err(WeightFormatError::BadMagic));

        let short = &bytes[..bytes.len() - 2];
        assert!(matches!(
            WeightStore::from_bytes(short),
            Err(WeightFormatError::TruncatedPayload { .. })
        ));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert_eq!(
            WeightStore::from_bytes(&long),
            Err(WeightFormatError::TrailingBytes { extra: 4 })
        );

        let patch = |from: &str, to: &str| {
            let h = header_len(&bytes);
            let text = std::str::from_utf8(&bytes[16..16 + h]).unwrap().replace(from, to);
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
            out.extend_from_slice(&bytes[16 + h..]);
            out
        };
        assert!(matches!(
            WeightStore::from_bytes(&patch("\"offset\":12", "\"offset\":8")),
            Err(WeightFormatError::OverlappingOffsets { .. })
        ));
        assert!(matches!(
            WeightStore::from_bytes(&patch("\"offset\":12", "\"offset\":14")),
            Err(WeightFormatError::Misaligned { .. })
        ));
        assert!(matches!(
            WeightStore::from_bytes(&patch("\"dtype\":\"f32\"", "\"dtype\":\"f16\"")),
            Err(WeightFormatError::UnsupportedDtype { .. })
        ));
        assert!(matches!(
            WeightStore::from_bytes(&bytes[..20]),
            Err(WeightFormatError::TruncatedHeader { .. })
        ));
    }

    #[test]
    fn nan_payload_bits_survive() {
        let mut s = WeightStore::new();
        let weird = f32::from_bits(0x7fc0_1234);
        s.insert("n", StoredTensor::new(vec![2], vec![weird, -0.0]).unwrap());
        let back = WeightStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.get("n").unwrap().data[0].to_bits(), 0x7fc0_1234);
        assert_eq!(back.get("n").unwrap().data[1].to_bits(), (-0.0f32).to_bits());
    }
}
