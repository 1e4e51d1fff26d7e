use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use steervec::fsutil::{sha256, write_atomic};

/// Provenance record written next to the primary output of every
/// artifact-producing command. It is the only file that carries a timestamp.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub created_unix_secs: u64,
}

impl RunManifest {
    pub fn new(command: &str, flags: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            flags: serde_json::to_value(flags)?,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix_secs: 0,
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs
            .insert(path.display().to_string(), hex::encode(sha256(&bytes)));
        Ok(())
    }

    /// Write `bytes` atomically and record the path.
    pub fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Stamp and write the manifest as `<primary>.manifest.json`.
    pub fn finish(mut self, primary: &Path) -> Result<PathBuf> {
        self.created_unix_secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let path = manifest_path(primary);
        write_atomic(&path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    sibling(primary, "manifest.json")
}

/// `dir/name.ext` becomes `dir/name.ext.<suffix>`.
pub fn sibling(primary: &Path, suffix: &str) -> PathBuf {
    let mut s = primary.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
