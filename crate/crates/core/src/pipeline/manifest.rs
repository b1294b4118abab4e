use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub git_describe: String,
    pub seed: u64,
    /// Every file the stage wrote, in write order.
    pub outputs: Vec<PathBuf>,
    pub wall_clock_ms: u64,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| crate::Error::Format(format!("manifest: {e}")))
    }
}

/// `git describe --always --dirty` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Collects output paths while a stage runs and writes the manifest once.
pub struct RunRecorder {
    started: Instant,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn start() -> Self {
        RunRecorder { started: Instant::now(), outputs: Vec::new() }
    }

    pub fn record(&mut self, path: impl Into<PathBuf>) {
        let path = path.into();
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.outputs
    }

    pub fn finish(self, cfg: &ExperimentConfig) -> Result<(RunManifest, PathBuf)> {
        let manifest = RunManifest {
            stage: cfg.stage.name().to_string(),
            config_hash: cfg.hash(),
            git_describe: git_describe(),
            seed: cfg.seed,
            outputs: self.outputs,
            wall_clock_ms: self.started.elapsed().as_millis() as u64,
            config: cfg.clone(),
        };
        std::fs::create_dir_all(&cfg.paths.output_dir)?;
        let path = cfg.paths.output_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        Ok((manifest, path))
    }
}
