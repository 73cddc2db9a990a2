//! Run manifest: inputs, derived facts and SHA-256 digests of every output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    #[serde(default)]
    pub facts: BTreeMap<String, f64>,
    #[serde(default)]
    pub files: BTreeMap<String, FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_toml: &str) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config_sha256: sha256_hex(config_toml.as_bytes()),
            facts: BTreeMap::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn fact(&mut self, key: &str, value: f64) {
        self.facts.insert(key.to_string(), value);
    }

    /// Writes `bytes` to `dir/name` and records its digest.
    pub fn write_file(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(
            name.to_string(),
            FileEntry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let text = toml::to_string(self)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trips() {
        let mut m = Manifest::new("generate", 3, "seed = 3");
        m.fact("noise_variance", 0.5);
        m.files.insert("A.bin".into(), FileEntry { sha256: sha256_hex(b""), bytes: 0 });
        let back: Manifest = toml::from_str(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
