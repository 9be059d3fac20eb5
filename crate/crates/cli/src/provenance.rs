//! Provenance records written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "testam";

#[derive(Debug, Serialize, Deserialize)]
pub struct Input {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved configuration, defaults and overrides applied.
    pub config: Option<Value>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<Input>,
    pub outputs: Vec<String>,
}

impl Provenance {
    pub fn new(command: &str, threads: usize) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: None,
            seed: None,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(Input {
            role: role.into(),
            path: path.to_path_buf(),
            sha256: hex_digest(&bytes),
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("provenance.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The config document of `text`: the `config` member when `text` is a
/// provenance record, otherwise the whole document.
pub fn config_document(text: &str) -> Result<String> {
    let doc: Value = serde_json::from_str(text)?;
    match doc.get("tool").and_then(Value::as_str) {
        Some(TOOL) if doc.get("command").is_some() => {
            let cfg = doc.get("config").cloned().unwrap_or(Value::Null);
            if cfg.is_null() {
                anyhow::bail!("provenance record carries no config");
            }
            Ok(serde_json::to_string(&cfg)?)
        }
        _ => Ok(text.to_string()),
    }
}
