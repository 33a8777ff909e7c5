//! Parameter checkpoint format (little-endian):
//!
//! ```text
//! magic "TRIMODCK" (8) | version u32 = 1 | count u64
//! per parameter, in registration order:
//!     name length u32 | name (UTF-8) | rank u32 | dims u64 × rank | data f64 × numel
//! SHA-256 of every preceding byte (32)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{ModelError, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRIMODCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checksum mismatch in {path}")]
    ChecksumMismatch { path: PathBuf },
    #[error("checkpoint {path} lacks parameter `{name}`")]
    MissingParam { path: PathBuf, name: String },
    #[error("checkpoint {path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
}

fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    crate::data::write_atomic(path, &encode(params)).map_err(|e| match e {
        crate::data::DataError::Io { path, source } => CheckpointError::Io { path, source },
        other => CheckpointError::Corrupt {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Reads every `(name, tensor)` entry in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |reason: &str| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 + 32 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(CheckpointError::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let count = r.u64().ok_or_else(|| corrupt("truncated header"))?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let truncated = || corrupt("truncated entry");
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| corrupt("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("shape overflows"))?;
        let raw = r
            .take(numel.checked_mul(8).ok_or_else(|| corrupt("shape overflows"))?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(&e.to_string()))?;
        entries.push((name, t));
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after last entry"));
    }
    Ok(entries)
}

/// Loads a checkpoint into `params`, which must have exactly the same
/// parameter names and shapes.
pub fn restore_checkpoint(params: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let entries = load_checkpoint(path)?;
    let model = |source| CheckpointError::Model {
        path: path.to_path_buf(),
        source,
    };
    for name in params.names().to_vec() {
        if !entries.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::MissingParam {
                path: path.to_path_buf(),
                name,
            });
        }
    }
    for (name, t) in entries {
        params.set(&name, t).map_err(model)?;
    }
    Ok(())
}
