//! Response cache kept as JSON lines, one record per request key.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    /// The request body as sent.
    pub request: serde_json::Value,
    pub response: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Hex SHA-256 of the serialized request body.
pub fn cache_key(request: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(request).expect("json value serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Default)]
pub struct Cache {
    path: Option<PathBuf>,
    records: BTreeMap<String, CacheRecord>,
    appender: Option<BufWriter<File>>,
}

impl Cache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; unreadable lines are skipped with a warning.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let mut records = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| GatewayError::Cache(e.to_string()))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(line) {
                    Ok(rec) => {
                        records.insert(rec.key.clone(), rec);
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache line: {e}", path.display(), i + 1),
                }
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            records,
            appender: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&CacheRecord> {
        self.records.get(key)
    }

    /// Stores a record and appends it to the backing file.
    pub fn insert(&mut self, request: serde_json::Value, response: String) -> Result<(), GatewayError> {
        let key = cache_key(&request);
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let rec = CacheRecord {
            key: key.clone(),
            request,
            response,
            timestamp,
        };
        if let Some(path) = &self.path {
            if self.appender.is_none() {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
                self.appender = Some(BufWriter::new(file));
            }
            let out = self.appender.as_mut().expect("opened above");
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(out, "{line}")
                .and_then(|_| out.flush())
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        self.records.insert(key, rec);
        Ok(())
    }

    /// Rewrites `path` with one line per record, sorted by key.
    pub fn flush_to(&mut self, path: &Path) -> Result<usize, GatewayError> {
        let err = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", path.display()));
        self.appender = None;
        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp).map_err(err)?);
            for rec in self.records.values() {
                writeln!(out, "{}", serde_json::to_string(rec).expect("record serializes")).map_err(err)?;
            }
            out.flush().map_err(err)?;
            out.get_ref().sync_all().map_err(err)?;
        }
        fs::rename(&tmp, path).map_err(err)?;
        Ok(self.records.len())
    }

    pub fn flush(&mut self) -> Result<usize, GatewayError> {
        match self.path.clone() {
            Some(path) => self.flush_to(&path),
            None => Ok(self.records.len()),
        }
    }
}

/// Compacts the cache file at `path` and returns its record count.
pub fn flush_cache(path: &Path) -> Result<usize, GatewayError> {
    Cache::open(path)?.flush_to(path)
}
