//! DVTN binary tensor container.
//!
//! Layout, all integers little-endian `u32`:
//! `"DVTN"`, version, entry count, then per entry the name length, UTF-8
//! name, dtype code (0 = f32, 1 = f64), rank, extents, and the row-major
//! little-endian payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DVTN";
pub const VERSION: u32 = 1;

/// A tensor in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Stored::F32(t.cast()),
            DType::F64 => Stored::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::F32,
            Stored::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.dims(),
            Stored::F64(t) => t.dims(),
        }
    }

    /// Converts to `T`; widening is exact, narrowing rounds.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Stored::F32(t) => t.cast(),
            Stored::F64(t) => t.cast(),
        }
    }
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Stored)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Stored) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Integrity(format!("duplicate container entry {name:?}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.push(name, Stored::from_tensor(t))
    }

    pub fn get(&self, name: &str) -> Option<&Stored> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Stored)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The sole entry, or the one called `name` when there are several.
    pub fn single_or(&self, name: &str) -> Option<&Stored> {
        match self.entries.as_slice() {
            [(_, t)] => Some(t),
            _ => self.get(name),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for (name, t) in &self.entries {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.dtype().code());
            put_u32(&mut out, t.dims().len() as u32);
            for &d in t.dims() {
                put_u32(&mut out, d as u32);
            }
            match t {
                Stored::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Stored::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.fail(0, "missing DVTN magic"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(at, &format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut c = Container::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail(at + 4, "entry name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let dtype = DType::from_code(r.u32()?).ok_or_else(|| r.fail(at, "unknown dtype code"))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let at = r.pos;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| r.fail(at, "payload size overflows"))?;
            let payload = r.take(count)?;
            let t = match dtype {
                DType::F32 => Stored::F32(decode(payload, dims)?),
                DType::F64 => Stored::F64(decode(payload, dims)?),
            };
            if c.get(&name).is_some() {
                return Err(r.fail(at, &format!("duplicate entry {name:?}")));
            }
            c.entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes after the last entry"));
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_weights<T: Scalar>(w: &ModelWeights<T>) -> Result<Self> {
        let mut c = Container::new();
        for (name, t) in w.named() {
            c.push_tensor(name, t)?;
        }
        Ok(c)
    }

    pub fn to_weights<T: Scalar>(&self, cfg: &ModelConfig) -> Result<ModelWeights<T>> {
        let map: BTreeMap<String, Tensor<T>> =
            self.entries.iter().map(|(n, t)| (n.clone(), t.to_tensor())).collect();
        ModelWeights::from_named(cfg, map)
    }
}

fn decode<T: Scalar>(payload: &[u8], dims: Vec<usize>) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(dims, data)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(self.pos, &format!("need {n} bytes, {} left", self.bytes.len() - self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn fail(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset: offset as u64,
            message: message.to_string(),
        }
    }
}
