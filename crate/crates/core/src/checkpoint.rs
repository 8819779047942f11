//! Binary checkpoint container shared by backbone and adapter weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DEPTCKPT"
//! version      u32
//! tensor count u32
//! per tensor:
//!   name       u32 byte length + UTF-8 bytes
//!   rank       u32
//!   dims       rank × u64
//!   values     numel × f32 (IEEE-754)
//! metadata     u32 entry count, then per entry: key and value, each as
//!              u32 byte length + UTF-8 bytes, sorted by key
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{DeptError, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DEPTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: t.values().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_values<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::of(v as f64)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.tensors.push(NamedTensor::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| DeptError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DeptError::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?
            .parse()
            .map_err(|_| DeptError::Checkpoint(format!("metadata `{key}` is not a count")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            write_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(DeptError::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DeptError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            if rank == 0 || numel == 0 {
                return Err(DeptError::Checkpoint(format!("tensor `{name}` is empty")));
            }
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| {
                DeptError::Checkpoint(format!("tensor `{name}` is too large"))
            })?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        let entries = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..entries {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(DeptError::Checkpoint("trailing bytes after metadata".into()));
        }
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| {
            DeptError::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DeptError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| DeptError::Checkpoint("name is not UTF-8".into()))
    }
}
