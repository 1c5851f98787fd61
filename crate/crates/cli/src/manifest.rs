use std::path::{Path, PathBuf};

use serde::Serialize;

/// Reproducibility record written alongside every output: the resolved
/// configuration with all defaults materialized, plus provenance.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub artifact_version: String,
    pub created_at: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Writes `manifest.json` into a directory, or `<file>.manifest.json`
    /// next to a file output.
    pub fn write_for(&self, target: &Path) -> anyhow::Result<PathBuf> {
        let path = if target.is_dir() {
            target.join("manifest.json")
        } else {
            let mut name = target.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            target.with_file_name(name)
        };
        let file = std::fs::File::create(&path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(path)
    }
}
