//! Continual pre-training: token-budget arithmetic, warmup plus cosine
//! learning rate, AdamW, deterministic packed batches and checkpointing.

mod checkpoint;
mod config;
mod data;
mod optim;
mod retention;
mod schedule;
mod trainer;

use std::path::{Path, PathBuf};

pub use checkpoint::{
    checkpoint_dir_name, load_checkpoint, read_checkpoint_manifest, save_checkpoint, BlobEntry, Checkpoint,
    CheckpointManifest, MANIFEST, OPTSTATE_BLOB, PARAMS_BLOB, RNG_BLOB,
};
pub use config::TrainConfig;
pub use data::{pack, DataLoader, LoaderState};
pub use optim::{AdamWConfig, OptimizerState};
pub use retention::evaluate_retention;
pub use schedule::{checkpoint_schedule, compute_max_steps, run_schedule, tokens_per_step, LrSchedule};
pub use trainer::{read_train_log, train, write_train_log, RunPlan, StepLog, TrainOutcome, Trainer, TRAIN_LOG};

use crate::nn::NnError;
use crate::probe::ProbeError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus has no tokens")]
    EmptyCorpus,
    #[error("step {step} outside [0, {max_steps}]")]
    StepOutOfRange { step: u64, max_steps: u64 },
    #[error("checkpoint schedule needs at least 10 steps, got {0}")]
    ScheduleTooShort(u64),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checksum mismatch in {blob}: expected {expected}, found {actual}")]
    Checksum {
        blob: String,
        expected: String,
        actual: String,
    },
    #[error("malformed checkpoint data: {0}")]
    Format(String),
    #[error("checkpoint callback failed: {0}")]
    Callback(String),
    #[error("held-out fact set is empty")]
    EmptyHeldout,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
