//! Single-file archive of named arrays with a JSON header.
//!
//! Layout: the 8-byte magic `VERSEARC`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header, then
//! the raw little-endian array data in header order. Used for checkpoints and
//! for per-layer mask dumps.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VERSEARC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// "f32" or "f64".
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

/// Arrays kept in their stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32(t) => t.shape(),
            Array::F64(t) => t.shape(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Array::F32(t) => t.cast(),
            Array::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            "f32" => Array::F32(t.cast()),
            _ => Array::F64(t.cast()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, arrays: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.arrays.push((name.into(), Array::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::new();
        for (name, a) in &self.arrays {
            let (dtype, offset) = (a_dtype(a), data.len());
            match a {
                Array::F32(t) => t.data().iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
                Array::F64(t) => t.data().iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            }
            entries.push(ArrayEntry { name: name.clone(), shape: a.shape().to_vec(), dtype: dtype.into(), offset });
        }
        let header = Header { kind: self.kind.clone(), meta: self.meta.clone(), arrays: entries };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut fixed = [0u8; 20];
        bytes.read_exact(&mut fixed).map_err(|_| Error::Format("archive truncated before header".into()))?;
        if &fixed[..8] != MAGIC {
            return Err(Error::Format("not a verse archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("archive format {version}, this build reads {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(fixed[12..20].try_into().expect("8 bytes")) as usize;
        if bytes.len() < hlen {
            return Err(Error::Format("archive truncated inside header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[..hlen])?;
        let data = &bytes[hlen..];
        let mut arrays = Vec::new();
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Format(format!("unknown dtype {other:?} for {}", e.name))),
            };
            let raw = data
                .get(e.offset..e.offset + n * width)
                .ok_or_else(|| Error::Format(format!("array {} runs past end of archive", e.name)))?;
            let a = if width == 4 {
                let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Array::F32(Tensor::from_vec(&e.shape, v)?)
            } else {
                let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Array::F64(Tensor::from_vec(&e.shape, v)?)
            };
            arrays.push((e.name, a));
        }
        Ok(Self { kind: header.kind, meta: header.meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn a_dtype(a: &Array) -> &'static str {
    match a {
        Array::F32(_) => "f32",
        Array::F64(_) => "f64",
    }
}
