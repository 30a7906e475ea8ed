//! Content-addressed replay fixtures.
//!
//! A fixture file is JSON-lines: a header record carrying the schema
//! version, then `{key_hash, kind, payload}` entries. Keys are SHA-256
//! hashes of the canonical request descriptor, so recorded responses are
//! matched by content, never by call order across different requests.
//!
//! Repeated identical requests are supported by storing several entries
//! under one key: lookups consume them FIFO and repeat the last entry once
//! exhausted. Keys with a single entry therefore behave as pure functions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::Result;

pub const FIXTURE_SCHEMA_VERSION: u32 = 1;

/// Canonical request key: SHA-256 over the parts joined with a separator
/// byte that cannot appear inside UTF-8 text fields.
pub fn fixture_key(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    key_hash: String,
    kind: String,
    payload: serde_json::Value,
}

#[derive(Default)]
struct Slot {
    payloads: Vec<serde_json::Value>,
    cursor: usize,
}

/// One fixture file, opened for replay or for recording.
pub struct FixtureStore {
    path: PathBuf,
    slots: Mutex<BTreeMap<String, Slot>>,
    writer: Option<Mutex<BufWriter<File>>>,
}

impl FixtureStore {
    /// Opens an existing fixture file for replay. Fails fast on a missing
    /// file or a schema version mismatch.
    pub fn open(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::validation(format!("fixture file {} is empty", path.display())))??;
        let header: Header = serde_json::from_str(&header_line)?;
        if header.schema_version != FIXTURE_SCHEMA_VERSION {
            return Err(Error::FixtureSchema {
                found: header.schema_version,
                expected: FIXTURE_SCHEMA_VERSION,
            });
        }
        let mut slots: BTreeMap<String, Slot> = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: Entry = serde_json::from_str(&line)?;
            slots
                .entry(entry.key_hash)
                .or_default()
                .payloads
                .push(entry.payload);
        }
        Ok(FixtureStore {
            path: path.to_path_buf(),
            slots: Mutex::new(slots),
            writer: None,
        })
    }

    /// Creates (truncates) a fixture file for recording and writes the
    /// schema header.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut writer = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut writer, &Header { schema_version: FIXTURE_SCHEMA_VERSION })?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(FixtureStore {
            path: path.to_path_buf(),
            slots: Mutex::new(BTreeMap::new()),
            writer: Some(Mutex::new(writer)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Replays the next payload for a key (FIFO across duplicates, then the
    /// last entry repeats). A missing key is a fixture-drift error.
    pub fn fetch(&self, key_hash: &str, kind: &str) -> Result<serde_json::Value> {
        let mut slots = self.slots.lock().expect("fixture slots poisoned");
        let slot = slots.get_mut(key_hash).ok_or_else(|| Error::FixtureMiss {
            kind: kind.to_string(),
            key: key_hash.to_string(),
        })?;
        let idx = slot.cursor.min(slot.payloads.len() - 1);
        slot.cursor = slot.cursor.saturating_add(1);
        Ok(slot.payloads[idx].clone())
    }

    /// Appends a recorded response; single-writer, callable concurrently.
    /// Consecutive identical payloads for a key collapse to one entry
    /// (replay repeats the last entry, so behavior is unchanged).
    pub fn record(&self, key_hash: &str, kind: &str, payload: serde_json::Value) -> Result<()> {
        let writer = self.writer.as_ref().ok_or_else(|| {
            Error::validation("fixture store opened for replay, not recording")
        })?;
        {
            let slots = self.slots.lock().expect("fixture slots poisoned");
            if let Some(slot) = slots.get(key_hash) {
                if slot.payloads.last() == Some(&payload) {
                    return Ok(());
                }
            }
        }
        let entry = Entry {
            key_hash: key_hash.to_string(),
            kind: kind.to_string(),
            payload: payload.clone(),
        };
        {
            let mut w = writer.lock().expect("fixture writer poisoned");
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.slots
            .lock()
            .expect("fixture slots poisoned")
            .entry(entry.key_hash)
            .or_default()
            .payloads
            .push(entry.payload);
        Ok(())
    }

    /// Number of recorded entries across all keys.
    pub fn len(&self) -> usize {
        self.slots
            .lock()
            .expect("fixture slots poisoned")
            .values()
            .map(|s| s.payloads.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
