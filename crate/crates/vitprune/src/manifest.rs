//! Provenance manifests and atomic file output.
//!
//! Every CLI command records what it ran with (tool version, command, input
//! paths, seeds, output paths) in a `RunManifest`. The manifest hash covers
//! only those deterministic fields, never the timestamp, so artifacts that
//! embed the hash stay bit-identical when a run is reproduced later. Binary
//! artifacts, whose formats carry no provenance field, are covered by the
//! manifest sidecar written next to them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Version stamped into every JSON artifact this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

pub fn to_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            write!(s, "{b:02x}").expect("writing to a String cannot fail");
            s
        })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

/// Write `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename, so failures never leave a partial artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Input files the command consumed (configs, models, datasets, profiles).
    pub config_paths: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_paths: Vec<String>,
    /// Wall-clock seconds since the Unix epoch; excluded from the hash.
    pub timestamp_unix: u64,
    /// SHA-256 over the deterministic fields above (not the timestamp).
    pub manifest_hash: String,
}

/// The hashed subset, serialized canonically in declaration order.
#[derive(Serialize)]
struct HashedFields<'a> {
    schema_version: u32,
    tool_version: &'a str,
    command: &'a str,
    config_paths: &'a [String],
    seeds: &'a [u64],
    output_paths: &'a [String],
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_paths: Vec<String>,
        seeds: Vec<u64>,
        output_paths: Vec<String>,
    ) -> Self {
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let hashed = HashedFields {
            schema_version: SCHEMA_VERSION,
            tool_version: &tool_version,
            command,
            config_paths: &config_paths,
            seeds: &seeds,
            output_paths: &output_paths,
        };
        let bytes = serde_json::to_vec(&hashed).expect("manifest fields serialize");
        let manifest_hash = sha256_hex(&bytes);
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            schema_version: SCHEMA_VERSION,
            tool_version,
            command: command.to_string(),
            config_paths,
            seeds,
            output_paths,
            timestamp_unix,
            manifest_hash,
        }
    }

    /// Sidecar path for a primary output: `model.vitw` →
    /// `model.vitw.manifest.json`. Appends rather than swaps the extension
    /// so outputs sharing a stem keep distinct sidecars.
    pub fn sidecar_path(primary_output: &Path) -> PathBuf {
        let mut name = primary_output.as_os_str().to_os_string();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn write_sidecar(&self, primary_output: &Path) -> Result<PathBuf> {
        let path = Self::sidecar_path(primary_output);
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}
