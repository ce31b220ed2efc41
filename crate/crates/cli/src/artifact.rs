//! JSON artifact envelope and the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use covgam::digest::sha256_hex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Every JSON output carries its lineage next to the payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input file name → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub payload: T,
}

/// Per-command record of inputs and outputs, including CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub struct Workspace {
    pub dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Workspace {
    pub fn new(dir: &Path, config_hash: String, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn label(path: &Path) -> String {
        path.file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    }

    /// Reads an input file and records its hash.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| {
            covgam::Error::InvalidInput(format!("cannot read {}: {e}", path.display()))
        })?;
        self.inputs.insert(Self::label(path), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Loads the payload of an artifact in the output directory.
    pub fn load<T: DeserializeOwned>(&mut self, name: &str) -> Result<T> {
        let path = self.dir.join(name);
        let bytes = self.read(&path)?;
        let a: Artifact<T> = serde_json::from_slice(&bytes)
            .map_err(|e| covgam::Error::State(format!("{}: {e}", path.display())))?;
        Ok(a.payload)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, kind: &str, payload: &T) -> Result<()> {
        let a = Artifact {
            kind: kind.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            inputs: self.inputs.clone(),
            payload,
        };
        let mut text = serde_json::to_string_pretty(&a)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn finish(mut self, command: &str) -> Result<()> {
        let m = Manifest {
            command: command.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        let name = format!("{command}.manifest.json");
        let path = self.dir.join(&name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.clear();
        Ok(())
    }
}
