//! Run manifests: every CLI command records what it ran, on what, and what
//! it produced.

use crate::checkpoint::file_sha256;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Snapshot of the effective configuration, when the command has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(ArtifactRef {
            path: path.display().to_string(),
            sha256: None,
        });
    }

    /// Record an output file with its content hash.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(ArtifactRef {
            path: path.display().to_string(),
            sha256: Some(file_sha256(path)?),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text + "\n").map_err(Error::io(path))?;
        Ok(())
    }
}

/// Manifest location for a command writing to `out`: `manifest.json` inside
/// an output directory, `<out>.manifest.json` next to an output file.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}
