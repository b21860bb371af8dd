use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::hex;

/// Run record written next to a command's artifacts.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub metrics: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Files produced by a command, checksummed once it finishes.
#[derive(Debug, Default)]
pub struct Artifacts(Vec<PathBuf>);

impl Artifacts {
    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.0.push(path.into());
    }

    pub fn checksums(&self) -> Result<BTreeMap<String, String>> {
        self.0.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
    }
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
