//! Run manifests: every CLI command records its resolved configuration, the
//! seed, and content hashes of its inputs next to its primary output, so a
//! run can be reproduced or audited later.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<InputHash> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    Ok(InputHash { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

/// Hashes every file under a directory (sorted relative paths), so
/// checkpoint directories can be recorded as single inputs.
pub fn hash_tree(path: impl AsRef<Path>) -> Result<InputHash> {
    let root = path.as_ref();
    if root.is_file() {
        return hash_file(root);
    }
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in &files {
        h.update(f.strip_prefix(root).unwrap_or(f).to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(&std::fs::read(f)?);
    }
    Ok(InputHash { path: root.display().to_string(), sha256: hex_string(&h.finalize()) })
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        let config_hash = sha256_hex(config.to_string().as_bytes());
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.push(hash_tree(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: impl AsRef<Path>) {
        self.outputs.push(path.as_ref().display().to_string());
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
