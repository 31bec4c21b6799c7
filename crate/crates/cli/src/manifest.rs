//! Run manifests: what was run, with which settings, on which files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Arguments after the program name; `replay` re-runs them.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub timings: Vec<Timing>,
}

pub fn sha256_file(path: &Path) -> CliResult<FileRecord> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: format!("{:x}", Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Collects a manifest while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    stage_start: Instant,
}

impl Recorder {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Recorder {
            manifest: RunManifest {
                tool: format!("physgrid {}", env!("CARGO_PKG_VERSION")),
                command: command.to_string(),
                argv: argv.to_vec(),
                config: serde_json::Value::Null,
                seeds: Vec::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings: Vec::new(),
            },
            stage_start: Instant::now(),
        }
    }

    pub fn config(&mut self, value: impl Serialize) -> CliResult<()> {
        self.manifest.config = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seeds.push(seed);
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.manifest.inputs.push(sha256_file(path)?);
        Ok(())
    }

    /// Writes `bytes` to `path` and records it.
    pub fn output(&mut self, path: PathBuf, bytes: &[u8]) -> CliResult<()> {
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.outputs.push(sha256_file(&path)?);
        Ok(())
    }

    /// Ends the current stage.
    pub fn lap(&mut self, stage: &str) {
        self.manifest.timings.push(Timing {
            stage: stage.to_string(),
            seconds: self.stage_start.elapsed().as_secs_f64(),
        });
        self.stage_start = Instant::now();
    }

    pub fn finish(mut self, dir: &Path) -> CliResult<RunManifest> {
        self.lap("finish");
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self.manifest)
    }
}
