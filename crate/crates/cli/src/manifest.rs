//! Run manifests: what was run, with which config, and the digest of every
//! file it wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path relative to the output directory (outputs) or as given (inputs).
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub seeds: winq_core::train::Seeds,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Command-specific results (losses, ratios, statistics).
    pub summary: serde_json::Value,
}

impl ExperimentManifest {
    /// Recompute the digests of all listed outputs under `dir` and return the
    /// ones that no longer match.
    pub fn stale_outputs(&self, dir: &Path) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for f in &self.outputs {
            if sha256_file(&dir.join(&f.path))? != f.sha256 {
                stale.push(f.path.clone());
            }
        }
        Ok(stale)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The config snapshot this run used.
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json_str(&self.config.to_string())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects output files of one command run, then writes the manifest.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.record(name);
        Ok(p)
    }

    /// Note a file written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.written.iter().any(|n| n == name) {
            self.written.push(name.to_string());
        }
    }

    /// Write `config.json` and `manifest.json`; returns the manifest.
    pub fn finish(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        inputs: &[&Path],
        summary: serde_json::Value,
    ) -> Result<ExperimentManifest> {
        self.write(CONFIG_FILE, config.to_json().as_bytes())?;
        let outputs = self
            .written
            .iter()
            .map(|n| Ok(FileDigest { path: n.clone(), sha256: sha256_file(&self.path(n))? }))
            .collect::<Result<Vec<_>>>()?;
        let inputs = inputs
            .iter()
            .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let manifest = ExperimentManifest {
            command: command.to_string(),
            version: format!("winq-cli {}", env!("CARGO_PKG_VERSION")),
            config: serde_json::from_str(&config.to_json()).expect("config JSON parses"),
            config_digest: config.digest(),
            seeds: config.train.seeds,
            inputs,
            outputs,
            summary,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let p = self.path(MANIFEST_FILE);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(manifest)
    }
}
