//! Per-invocation record of configuration, stages, outputs and timing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<PathBuf>,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_file: Option<PathBuf>,
    pub config_file_sha256: Option<String>,
    /// SHA-256 of `effective_config` serialised as compact JSON.
    pub config_hash: String,
    pub effective_config: serde_json::Value,
    pub seed: Option<u64>,
    pub notes: Vec<String>,
    pub stages: Vec<StageRecord>,
    pub status: String,
    pub failure_stage: Option<String>,
    pub error: Option<String>,
}

/// Builds a [`RunManifest`] while stages execute; [`Recorder::finish`]
/// writes it whether or not a stage failed.
pub struct Recorder {
    pub manifest: RunManifest,
    out_dir: PathBuf,
}

impl Recorder {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        Recorder {
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config_file: None,
                config_file_sha256: None,
                config_hash: String::new(),
                effective_config: serde_json::Value::Null,
                seed: None,
                notes: Vec::new(),
                stages: Vec::new(),
                status: "running".into(),
                failure_stage: None,
                error: None,
            },
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn config_file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.config_file = Some(path.to_path_buf());
        self.manifest.config_file_sha256 = Some(sha256_hex(&bytes));
        Ok(())
    }

    pub fn effective_config<T: Serialize>(&mut self, cfg: &T, seed: Option<u64>) {
        let value = serde_json::to_value(cfg).expect("config serialises");
        let bytes = serde_json::to_vec(&value).expect("json serialises");
        self.manifest.config_hash = sha256_hex(&bytes);
        self.manifest.effective_config = value;
        self.manifest.seed = seed;
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.manifest.notes.push(note.into());
    }

    /// Runs one stage, recording its wall-clock time and the outputs it
    /// reports; a failure marks the stage and is passed on.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<(T, Vec<PathBuf>)>) -> Result<T> {
        log::info!("stage {name}");
        let t = Instant::now();
        let result = f();
        let wall = t.elapsed().as_secs_f64();
        match result {
            Ok((value, outputs)) => {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    wall_clock_seconds: wall,
                    outputs,
                    ok: true,
                });
                Ok(value)
            }
            Err(e) => {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    wall_clock_seconds: wall,
                    outputs: Vec::new(),
                    ok: false,
                });
                self.manifest.failure_stage = Some(name.to_string());
                Err(e)
            }
        }
    }

    /// Writes the manifest into the output directory; returns its path.
    pub fn finish(mut self, outcome: &Result<()>) -> Result<PathBuf> {
        match outcome {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(format!("{e:#}"));
                if self.manifest.failure_stage.is_none() {
                    self.manifest.failure_stage = Some("setup".into());
                }
            }
        }
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
