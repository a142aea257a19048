//! Append-only JSONL response cache: one `{key, model, text, timestamp}` object per line.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache {path}, line {line}: corrupted entry: {reason}")]
    Corrupted { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    model: String,
    text: String,
    timestamp: u64,
}

/// SHA-256 over the length-prefixed model name, system text and user text.
pub(crate) fn prompt_digest(model: &str, system: &str, user: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    for part in [model, system, user] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.finalize().into()
}

pub fn cache_key(model: &str, system: &str, user: &str) -> String {
    hex::encode(prompt_digest(model, system, user))
}

#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<File>,
}

impl ResponseCache {
    /// Opens (creating if needed) the cache file and loads every entry. A line
    /// that does not parse is an error naming that line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line).map_err(|e| CacheError::Corrupted {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                entries.insert(entry.key, entry.text);
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: &str, model: &str, text: &str) -> Result<(), CacheError> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let line = serde_json::to_string(&CacheLine {
            key: key.to_string(),
            model: model.to_string(),
            text: text.to_string(),
            timestamp,
        })
        .expect("cache line serializes");
        {
            let mut w = self.writer.lock().unwrap();
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| CacheError::Io {
                    path: self.path.clone(),
                    source,
                })?;
        }
        self.entries.write().unwrap().insert(key.to_string(), text.to_string());
        Ok(())
    }
}
