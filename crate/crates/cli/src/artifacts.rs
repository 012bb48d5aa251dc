use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use r2dl::embeddings::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run.json";

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a partially written file.
pub fn atomic_write(path: &Path, contents: &[u8]) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::internal(format!("writing {}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes =
        fs::read(path).map_err(|e| CliError::data(format!("reading {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input name → content hash.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn input(&mut self, name: &str, hash: impl Into<String>) {
        self.inputs.insert(name.into(), hash.into());
    }

    pub fn finish(mut self, out: &Path) -> CliResult<()> {
        self.finished_unix = unix_now();
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        atomic_write(&out.join(MANIFEST_FILE), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/theta.tsv");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let leftovers = fs::read_dir(path.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
