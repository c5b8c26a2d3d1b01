//! Named parameter collections and the binary checkpoint format.
//!
//! Layout: magic `TNSR`, version u32, count u32, then per entry
//! (name_len u32, UTF-8 name, dtype u8, rank u8, dims u32 x rank,
//! raw little-endian payload). Round-trips are bit-exact.
//!
//! Gradient participation is a naming convention: entries whose name ends in
//! `.running_mean` or `.running_var` are buffers, everything else trains.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;

/// Buffer (non-trainable) name suffixes.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

fn is_buffer_name(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Insertion-ordered map from parameter path to tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S: Scalar = f32> {
    entries: Vec<(String, Tensor<S>)>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: BTreeMap::new() }
    }

    /// Insert a trainable parameter.
    pub fn insert_param(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        self.insert_inner(name, tensor.with_grad())
    }

    /// Insert a non-trainable buffer (running statistics).
    pub fn insert_buffer(&mut self, name: &str, mut tensor: Tensor<S>) -> Result<()> {
        tensor.set_requires_grad(false);
        self.insert_inner(name, tensor)
    }

    fn insert_inner(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Data(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.entries[*&i].1)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Data(format!("no parameter named '{name}'")))?;
        if self.entries[i].1.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "set '{name}': expected {:?}, got {:?}",
                self.entries[i].1.shape(),
                tensor.shape()
            )));
        }
        let grad = self.entries[i].1.requires_grad();
        let mut t = tensor;
        t.set_requires_grad(grad);
        self.entries[i].1 = t;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order (deterministic given the construction
    /// sequence).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Apply named value updates (used for batch-norm running stats).
    pub fn apply_updates(&mut self, updates: &[(String, Tensor<S>)]) -> Result<()> {
        for (name, value) in updates {
            self.set(name, value.clone())?;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert_inner(name, t.cast()).expect("names already unique");
        }
        out
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(S::DTYPE.code());
            out.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                v.to_le_bytes(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: Some(0), msg: "bad magic, expected TNSR".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: Some(4),
                msg: format!("unsupported version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| r.err("name is not UTF-8"))?
                .to_string();
            let dtype_code = r.u8()?;
            let dtype = Dtype::from_code(dtype_code)
                .ok_or_else(|| r.err(&format!("unknown dtype {dtype_code}")))?;
            if dtype != S::DTYPE {
                return Err(r.err(&format!("dtype mismatch: file {dtype:?}, expected {:?}", S::DTYPE)));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * dtype.size())?;
            let data: Vec<S> =
                payload.chunks(dtype.size()).map(|c| S::from_le_slice(c)).collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| r.err(&format!("invalid tensor '{name}': {e}")))?;
            if is_buffer_name(&name) {
                set.insert_buffer(&name, tensor)?;
            } else {
                set.insert_param(&name, tensor)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last entry"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over the serialized bytes; identifies the exact weights.
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: Some(self.pos as u64),
                msg: format!("truncated: wanted {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn err(&self, msg: &str) -> Error {
        Error::Format { offset: Some(self.pos as u64), msg: msg.into() }
    }
}
