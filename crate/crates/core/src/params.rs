//! Parameter container: the on-disk format for encoders, reducers and
//! classifiers.
//!
//! Little-endian binary, version 1:
//!
//! ```text
//! magic      8 bytes  "HARPARAM"
//! version    u32      1
//! kind       str      "encoder" | "reducer" | "classifier"
//! n_meta     u32
//! meta       n_meta × (key: str, value: str)
//! n_tensors  u32
//! tensor     n_tensors × (name: str, ndim: u32, dims: ndim × u64, data: prod(dims) × f64)
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8. Meta entries carry
//! architecture hyperparameters and label tables; loaders compare them with
//! what they expect and reject mismatches.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HARPARAM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { name: name.into(), shape, data }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamContainer {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

impl ParamContainer {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), ..Self::default() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        self.tensors.push(Tensor::new(name, shape, data.to_vec()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| Error::Format(format!("missing meta entry '{key}'")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(())
    }

    /// Tensor `name`, checked against `shape`.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
        if t.shape != shape {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, architecture expects {:?}",
                t.shape, shape
            )));
        }
        Ok(t.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a parameter container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let kind = r.str()?;
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            meta.push((r.str()?, r.str()?));
        }
        let n_t = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_t.min(1024));
        for _ in 0..n_t {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
}
