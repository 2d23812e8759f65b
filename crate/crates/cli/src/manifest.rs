use std::path::{Path, PathBuf};

use anyhow::Result;
use lexcopy::checkpoint::file_sha256;
use serde::Serialize;

use crate::settings::Settings;

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileRecord {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        })
    }
}

/// Written as `run.json` next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: Settings,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub checkpoints: Vec<FileRecord>,
    pub metrics: serde_json::Value,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: &[String], settings: &Settings) -> Self {
        RunManifest {
            tool: format!("lexcopy {}", env!("CARGO_PKG_VERSION")),
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            seed: settings.seed(),
            config: settings.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoints: Vec::new(),
            metrics: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoints.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}
