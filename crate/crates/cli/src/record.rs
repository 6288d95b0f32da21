//! Run records: config snapshot, stage timings and output digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub config_digest: String,
    pub seed: u64,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<OutputFile>,
}

/// Collects stage timings and written files while a command runs.
pub struct Recorder {
    command: String,
    out_dir: PathBuf,
    stages: Vec<StageTiming>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl Recorder {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        Recorder {
            command: command.to_string(),
            out_dir: out_dir.to_path_buf(),
            stages: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Closes the current stage under `name`.
    pub fn stage(&mut self, name: &str) {
        self.stages.push(StageTiming {
            stage: name.to_string(),
            seconds: self.started.elapsed().as_secs_f64(),
        });
        self.started = Instant::now();
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `run_<command>.json` into the output directory and returns
    /// the record.
    pub fn finish(self, cfg: Option<&ExperimentConfig>, seed: u64) -> CliResult<RunRecord> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            outputs.push(OutputFile {
                path: p.strip_prefix(&self.out_dir).unwrap_or(p).display().to_string(),
                sha256: sha256_file(p)?,
            });
        }
        let record = RunRecord {
            command: self.command.clone(),
            config: cfg.map(|c| c.entries.clone()).unwrap_or_default(),
            config_digest: cfg.map(ExperimentConfig::digest).unwrap_or_default(),
            seed,
            stages: self.stages,
            outputs,
        };
        let path = self.out_dir.join(format!("run_{}.json", self.command));
        let text = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(record)
    }
}
