//! Per-artifact-directory run manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    /// Flat `key = value` rendering of the effective config.
    pub config: String,
    pub seed: u64,
    /// Input path → sha256 of its content.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

impl RunManifest {
    pub fn start(command: &str, config: String, seed: u64, inputs: &[&Path]) -> io::Result<Self> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            hashes.insert(p.display().to_string(), hash_path(p)?);
        }
        Ok(Self {
            command: command.to_string(),
            status: "running".into(),
            config,
            seed,
            inputs: hashes,
            outputs: Vec::new(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
        })
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        write_atomic(&dir.join(MANIFEST_FILE), &bytes)
    }

    pub fn finish(mut self, dir: &Path, outputs: Vec<PathBuf>) -> io::Result<()> {
        self.status = "complete".into();
        self.outputs = outputs;
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        self.write(dir)
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Files hash their bytes; directories hash every `relative path\0file hash`
/// line in sorted order.
pub fn hash_path(path: &Path) -> io::Result<String> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut hasher = Sha256::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(hash_file(entry.path())?.as_bytes());
            hasher.update(b"\n");
        }
    }
    Ok(hex::encode(hasher.finalize()))
}
