//! Content-addressed on-disk cache for provider responses.
//!
//! Entries live at `<dir>/<key[0..2]>/<key>.json` where `key` is the SHA-256
//! of the canonical JSON encoding of the request identity.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::io;

/// Hex SHA-256 of a UTF-8 string. Used both for prompt hashes and as the
/// lookup key of precomputed embedding files.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Hex SHA-256 of the JSON encoding of `identity`.
pub fn key_of<K: Serialize>(identity: &K) -> Result<String> {
    let encoded = serde_json::to_vec(identity)?;
    Ok(hex::encode(Sha256::digest(&encoded)))
}

#[derive(Debug, Clone)]
pub struct ContentCache {
    dir: PathBuf,
}

impl ContentCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        let shard = &key[..key.len().min(2)];
        self.dir.join(shard).join(format!("{key}.json"))
    }

    /// Returns `None` on a miss. A corrupt entry is treated as a miss so the
    /// value gets regenerated and overwritten.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let path = self.entry_path(key);
        let text = std::fs::read_to_string(&path).ok()?;
        match serde_json::from_str(&text) {
            Ok(v) => Some(v),
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring corrupt cache entry");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value)?;
        io::atomic_write(&self.entry_path(key), &bytes)
    }
}
