//! Run manifests: the resolved invocation of a command, written to its
//! output directory before any training or evaluation starts.

use std::path::{Path, PathBuf};

use lmser::training::TrainConfig;
use lmser::{LmserConfig, Result};
use serde::{Deserialize, Serialize};

use crate::commands::Command;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub command: String,
    pub seed: u64,
    /// Dataset files read by the run.
    pub data_files: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub network: Option<LmserConfig>,
    pub training: Option<TrainConfig>,
    /// Fully resolved arguments; replaying runs exactly this.
    pub invocation: Command,
}

impl RunManifest {
    pub fn new(invocation: &Command, output_dir: &Path) -> Self {
        Self {
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            command: invocation.name().to_string(),
            seed: 0,
            data_files: Vec::new(),
            output_dir: output_dir.to_path_buf(),
            network: None,
            training: None,
            invocation: invocation.clone(),
        }
    }

    /// Creates the output directory and writes `manifest.json` into it.
    pub fn write(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
