//! Run manifests: one JSON record per invocation with the resolved command,
//! seeds, toolkit version, SHA-256 of every input and output, and timings.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cli::Command;
use crate::error::{CliError, Result};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Model,
    Dataset,
    Report,
    Table,
    Manifest,
}

impl FileKind {
    /// Whether the file is a pure function of the invocation (no timings inside).
    pub fn deterministic(self) -> bool {
        matches!(self, FileKind::Model | FileKind::Table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub kind: FileKind,
    pub sha256: String,
    pub bytes: u64,
}

impl FileRecord {
    pub fn of(path: &Path, kind: FileKind) -> Result<Self> {
        let data = fs::read(path).map_err(|e| CliError::file(path, e))?;
        Ok(FileRecord {
            path: path.to_path_buf(),
            kind,
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: Option<u64>,
    /// Where the seed came from: "flag", "env" (LDFC_SEED) or "default".
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// The fully resolved invocation; `ldfc replay` re-runs exactly this.
    pub invocation: Command,
    pub seeds: Seeds,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub timings: Vec<Timing>,
    pub total_millis: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::file(path, e))
    }
}

/// Collects the files and stage timings of one run.
#[derive(Debug)]
pub struct Recorder {
    started: Instant,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub timings: Vec<Timing>,
}

impl Default for Recorder {
    fn default() -> Self {
        Recorder {
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        }
    }
}

impl Recorder {
    pub fn input(&mut self, path: &Path, kind: FileKind) -> Result<()> {
        self.inputs.push(FileRecord::of(path, kind)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path, kind: FileKind) -> Result<()> {
        self.outputs.push(FileRecord::of(path, kind)?);
        Ok(())
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.record(stage, t.elapsed().as_secs_f64() * 1e3);
        Ok(out)
    }

    pub fn record(&mut self, stage: &str, millis: f64) {
        self.timings.push(Timing {
            stage: stage.into(),
            millis,
        });
    }

    pub fn finish(self, invocation: Command, seeds: Seeds) -> RunManifest {
        RunManifest {
            schema: MANIFEST_SCHEMA,
            tool: "ldfc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: invocation.name().into(),
            invocation,
            seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            timings: self.timings,
            total_millis: self.started.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// `<output>.manifest.json` next to the primary output, or
/// `./ldfc-<command>.manifest.json` for commands without one.
pub fn default_manifest_path(command: &Command) -> PathBuf {
    match command.primary_output() {
        Some(out) => {
            let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
        None => PathBuf::from(format!("ldfc-{}.manifest.json", command.name())),
    }
}
