//! Self-describing binary container for tensors.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! listing `{name, dtype, shape}` per entry plus free-form metadata, then the
//! little-endian payloads concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VERSION: u32 = 1;
pub const TENSOR_MAGIC: [u8; 8] = *b"VTTSTNS\0";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"VTTSCKP\0";

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error("unsupported tensor file version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("missing tensor entry {0}")]
    Missing(String),
}

type Result<T> = std::result::Result<T, TensorFileError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredDType {
    F32,
    F64,
    I32,
}

impl StoredDType {
    fn width(self) -> usize {
        match self {
            StoredDType::F32 | StoredDType::I32 => 4,
            StoredDType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> StoredDType {
        match self {
            TensorData::F32(_) => StoredDType::F32,
            TensorData::F64(_) => StoredDType::F64,
            TensorData::I32(_) => StoredDType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: StoredDType,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<HeaderEntry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub magic: [u8; 8],
    pub entries: Vec<Entry>,
    pub meta: serde_json::Value,
}

impl TensorFile {
    pub fn new(magic: [u8; 8]) -> Self {
        Self {
            magic,
            entries: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorFileError::Format(format!(
                "entry {name}: shape {shape:?} but {} values",
                data.len()
            )));
        }
        self.entries.push(Entry { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| TensorFileError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            entries: self
                .entries
                .iter()
                .map(|e| HeaderEntry {
                    name: e.name.clone(),
                    dtype: e.data.dtype(),
                    shape: e.shape.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: [u8; 8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(TensorFileError::Format("truncated preamble".into()));
        }
        if bytes[..8] != expected_magic {
            return Err(TensorFileError::Format("wrong magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(TensorFileError::Version { found: version });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(TensorFileError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| TensorFileError::Format(format!("header json: {e}")))?;
        let mut payload = &body[hlen..];
        let expected: usize = header
            .entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * e.dtype.width())
            .sum();
        if payload.len() != expected {
            return Err(TensorFileError::Format(format!(
                "payload is {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut entries = Vec::with_capacity(header.entries.len());
        for h in header.entries {
            let n: usize = h.shape.iter().product();
            let (chunk, rest) = payload.split_at(n * h.dtype.width());
            payload = rest;
            let data = match h.dtype {
                StoredDType::F32 => TensorData::F32(
                    chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                StoredDType::F64 => TensorData::F64(
                    chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                StoredDType::I32 => TensorData::I32(
                    chunk.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
            };
            entries.push(Entry {
                name: h.name,
                shape: h.shape,
                data,
            });
        }
        Ok(Self {
            magic: expected_magic,
            entries,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path, expected_magic: [u8; 8]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes, expected_magic)
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TensorFileError {
    TensorFileError::Io {
        path: path.display().to_string(),
        source,
    }
}
