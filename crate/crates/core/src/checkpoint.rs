//! BTSF checkpoint container: magic, little-endian u32 version, a
//! length-prefixed JSON metadata block (config plus tensor directory), then
//! the raw little-endian f32 payload in directory order.
//!
//! serde_json keeps object keys sorted, so serialization is canonical and
//! write(read(bytes)) reproduces bytes exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"BTSF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    config: Value,
    tensors: Vec<DirEntry>,
}

/// In-memory checkpoint: free-form JSON config plus an ordered list of
/// named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub version: u32,
    pub config: Value,
    tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(config: Value) -> Self {
        Container {
            version: VERSION,
            config,
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {}", name)));
        }
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => {
                *t = tensor;
                Ok(())
            }
            None => self.insert(name, tensor),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} missing", name)))
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn config_str(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("config key {} missing", key)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut dir = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            dir.push(DirEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let meta = Metadata {
            config: self.config.clone(),
            tensors: dir,
        };
        let meta_bytes = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(12 + meta_bytes.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta_bytes);
        for (_, t) in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 12 {
            return Err(fail("truncated header"));
        }
        if bytes[0..4] != MAGIC {
            return Err(fail("bad magic, not a BTSF file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                version
            )));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + meta_len {
            return Err(fail("truncated metadata"));
        }
        let meta: Metadata = serde_json::from_slice(&bytes[12..12 + meta_len])?;
        let payload = &bytes[12 + meta_len..];
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut expected_offset = 0u64;
        for e in &meta.tensors {
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == e.name) {
                return Err(Error::Checkpoint(format!(
                    "duplicate tensor name {}",
                    e.name
                )));
            }
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor {} offset {} out of order",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} payload out of bounds",
                    e.name
                )));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(fail("trailing bytes after payload"));
        }
        Ok(Container {
            version,
            config: meta.config,
            tensors,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
