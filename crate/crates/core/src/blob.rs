//! Content-addressed sidecar storage for binary inputs.
//!
//! Sheets never embed bytes; they carry a [`BlobRef`] and the bytes live once
//! under `blobs/<sha256>`.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlobRef {
    pub sha256: String,
    pub len: u64,
}

impl BlobRef {
    pub fn of(bytes: &[u8]) -> Self {
        BlobRef {
            sha256: sha256_hex(bytes),
            len: bytes.len() as u64,
        }
    }

    /// Parses `blob:sha256:<64 lowercase hex>:<len>`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let rest = text
            .strip_prefix("blob:sha256:")
            .ok_or_else(|| format!("`{text}` is not a blob reference"))?;
        let (hash, len) = rest
            .split_once(':')
            .ok_or_else(|| format!("blob reference `{text}` lacks a length"))?;
        if !is_sha256_hex(hash) {
            return Err(format!("blob hash `{hash}` is not 64 lowercase hex characters"));
        }
        let len = len
            .parse()
            .map_err(|_| format!("blob length `{len}` is not a non-negative integer"))?;
        Ok(BlobRef {
            sha256: hash.to_string(),
            len,
        })
    }

    /// Wire representation handed to workers in place of the blob argument.
    pub fn to_wire(&self, store: Option<&BlobStore>) -> serde_json::Value {
        let mut wire = serde_json::json!({ "$blob": self.sha256, "len": self.len });
        if let Some(store) = store {
            wire["path"] = store.path_of(self).to_string_lossy().into_owned().into();
        }
        wire
    }
}

impl fmt::Display for BlobRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blob:sha256:{}:{}", self.sha256, self.len)
    }
}

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("blob {0} not found")]
    Missing(String),
    #[error("blob {0} is corrupt (hash or length mismatch)")]
    Corrupt(String),
    #[error("blob store I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(BlobStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, blob: &BlobRef) -> PathBuf {
        self.root.join(&blob.sha256)
    }

    /// Stores `bytes`, writing nothing when an identical blob already exists.
    pub fn put(&self, bytes: &[u8]) -> Result<BlobRef, BlobError> {
        let blob = BlobRef::of(bytes);
        let path = self.path_of(&blob);
        if !path.exists() {
            let tmp = self.root.join(format!(".{}.tmp", blob.sha256));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(blob)
    }

    pub fn get(&self, blob: &BlobRef) -> Result<Vec<u8>, BlobError> {
        let bytes = match fs::read(self.path_of(blob)) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(BlobError::Missing(blob.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        if BlobRef::of(&bytes) != *blob {
            return Err(BlobError::Corrupt(blob.to_string()));
        }
        Ok(bytes)
    }

    pub fn contains(&self, blob: &BlobRef) -> bool {
        self.path_of(blob).is_file()
    }
}
