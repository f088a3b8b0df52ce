//! Checkpoint directories: `manifest.json` plus `params.bin`, `optstate.bin`
//! and `rng.bin`, each guarded by a SHA-256 checksum.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::data::LoaderState;
use super::optim::{AdamWConfig, OptimizerState};
use super::TrainError;
use crate::nn::{f32_from_le_bytes, f32_to_le_bytes, ParamManifest, TransformerParams};

pub const PARAMS_BLOB: &str = "params.bin";
pub const OPTSTATE_BLOB: &str = "optstate.bin";
pub const RNG_BLOB: &str = "rng.bin";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: TransformerParams<f32>,
    pub optimizer: OptimizerState,
    pub loader: LoaderState,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub config_hash: String,
    pub train_config: TrainConfig,
    pub optimizer: AdamWConfig,
    pub optimizer_step: u64,
    pub tensors: ParamManifest,
    pub blobs: Vec<BlobEntry>,
}

pub fn checkpoint_dir_name(step: u64) -> String {
    format!("checkpoint-{step}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<(), TrainError> {
    fs::write(&path, bytes).map_err(|e| TrainError::io(&path, e))
}

impl Checkpoint {
    fn blobs(&self) -> [(&'static str, Vec<u8>); 3] {
        let mut opt = f32_to_le_bytes(&self.optimizer.m);
        opt.extend(f32_to_le_bytes(&self.optimizer.v));
        [
            (PARAMS_BLOB, self.params.to_blob()),
            (OPTSTATE_BLOB, opt),
            (RNG_BLOB, self.loader.to_bytes()),
        ]
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            step: self.step,
            config_hash: self.train_config.hash(),
            train_config: self.train_config.clone(),
            optimizer: self.optimizer.hyper,
            optimizer_step: self.optimizer.step,
            tensors: self.params.manifest(),
            blobs: self
                .blobs()
                .iter()
                .map(|(name, b)| BlobEntry {
                    file: name.to_string(),
                    bytes: b.len(),
                    sha256: sha256_hex(b),
                })
                .collect(),
        }
    }
}

/// Writes the checkpoint into `dir` (created if needed).
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    for (name, bytes) in ckpt.blobs() {
        write(dir.join(name), &bytes)?;
    }
    let json = serde_json::to_string_pretty(&ckpt.manifest()).expect("manifest serialises");
    write(dir.join(MANIFEST), (json + "\n").as_bytes())
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest, TrainError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| TrainError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Format(format!("{}: {e}", path.display())))
}

/// Reads and verifies a checkpoint; any checksum mismatch names the blob.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let manifest = read_checkpoint_manifest(dir)?;
    let read = |name: &str| -> Result<Vec<u8>, TrainError> {
        let entry = manifest
            .blobs
            .iter()
            .find(|b| b.file == name)
            .ok_or_else(|| TrainError::Format(format!("manifest lists no {name}")))?;
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| TrainError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(TrainError::Checksum {
                blob: name.to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        Ok(bytes)
    };
    let params = TransformerParams::from_blob(&manifest.tensors, &read(PARAMS_BLOB)?)?;
    let opt = f32_from_le_bytes(&read(OPTSTATE_BLOB)?)?;
    let n = params.data.len();
    if opt.len() != 2 * n {
        return Err(TrainError::Format(format!(
            "optimizer state holds {} values, expected {}",
            opt.len(),
            2 * n
        )));
    }
    let loader = LoaderState::from_bytes(&read(RNG_BLOB)?)?;
    if manifest.config_hash != manifest.train_config.hash() {
        return Err(TrainError::Format(
            "config hash does not match the recorded config".into(),
        ));
    }
    Ok(Checkpoint {
        step: manifest.step,
        params,
        optimizer: OptimizerState {
            hyper: manifest.optimizer,
            step: manifest.optimizer_step,
            m: opt[..n].to_vec(),
            v: opt[n..].to_vec(),
        },
        loader,
        train_config: manifest.train_config,
    })
}
