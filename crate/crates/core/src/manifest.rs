//! Run manifest: config hash, seeds, versions and output digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_source: Option<String>,
    /// SHA-256 of the canonical (re-serialized) configuration.
    pub config_sha256: String,
    pub config_canonical: String,
    pub seed: u64,
    pub crate_name: String,
    pub crate_version: String,
    pub parallel: bool,
    pub target: String,
    pub outputs: Vec<OutputDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>, config_source: Option<String>, canonical: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args,
            config_source,
            config_sha256: sha256_hex(canonical.as_bytes()),
            config_canonical: canonical,
            seed,
            crate_name: env!("CARGO_PKG_NAME").to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            parallel: crate::par::is_parallel(),
            target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            outputs: Vec::new(),
        }
    }

    /// Record digests of files written under `dir`, in sorted order.
    pub fn record_outputs(&mut self, dir: &Path, files: &[PathBuf]) -> Result<()> {
        let mut files = files.to_vec();
        files.sort();
        for f in files {
            let bytes = fs::read(&f)?;
            let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().into_owned();
            self.outputs.push(OutputDigest { path: rel, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
