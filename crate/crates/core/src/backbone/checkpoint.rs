//! Bit-exact binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MISTCKPT"            8 bytes
//! version               u32 (= 1)
//! tensor count          u32
//! per tensor:
//!   name length         u32
//!   name                UTF-8 bytes
//!   rank                u32
//!   dims                rank x u64
//!   data                prod(dims) x f64
//! checksum              u64, FNV-1a over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MISTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("{0} unexpected bytes after checksum")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor '{0}' has an implausible shape")]
    BadShape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
    pub checksum: u64,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name().to_string(),
                tensor: e.value().clone(),
            })
            .collect();
        let mut ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            tensors,
            checksum: 0,
        };
        ckpt.checksum = fnv1a64(&ckpt.body_bytes());
        ckpt
    }

    pub fn to_store(&self) -> Result<ParamStore, CheckpointError> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            store.insert(t.name.clone(), t.tensor.clone())?;
        }
        Ok(store)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.tensor.rank() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses a checkpoint. Structural problems (magic, version, truncation)
    /// are reported before the checksum is compared.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::InvalidName)?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8).map(|_| n))
                .ok_or_else(|| CheckpointError::BadShape(name.clone()))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::new(shape, data)?,
            });
        }
        let body_len = r.pos;
        let stored = r.u64()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        let computed = fnv1a64(&bytes[..body_len]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        Ok(Checkpoint {
            version,
            tensors,
            checksum: stored,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let ckpt = Checkpoint::from_store(store);
    fs::write(path, ckpt.to_bytes())?;
    Ok(ckpt)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore, CheckpointError> {
    read_checkpoint(path)?.to_store()
}
