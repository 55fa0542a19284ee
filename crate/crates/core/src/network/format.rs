//! Binary tensor bundle (`.lcoa`).
//!
//! All integers are unsigned 32-bit little-endian:
//!
//! ```text
//! "LCOA" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims[rank] | f32 LE values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LCOA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![v],
        }
    }
}

/// Uniquely named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    entries: Vec<(String, Tensor)>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.contains(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, || "magic".into())?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32(|| "version".into())?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32(|| "tensor count".into())?;
        let mut bundle = TensorBundle::new();
        for i in 0..count {
            let len = r.u32(|| format!("name length of tensor #{i}"))? as usize;
            let raw = r.take(len, || format!("name of tensor #{i}"))?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::InvalidArgument(format!("name of tensor #{i} is not UTF-8")))?
                .to_string();
            let rank = r.u32(|| format!("rank of tensor `{name}`"))? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32(|| format!("dims of tensor `{name}`"))? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c.checked_mul(4).is_some())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("dims of tensor `{name}` overflow"))
                })?;
            let raw = r.take(count * 4, || format!("data of tensor `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            bundle.insert(name, Tensor { dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TensorBundle::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, context: impl FnOnce() -> String) -> Result<&'a [u8]> {
        match self.pos.checked_add(len) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::Truncated { context: context() }),
        }
    }

    fn u32(&mut self, context: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, context)?.try_into().unwrap(),
        ))
    }
}
