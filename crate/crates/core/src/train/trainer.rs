use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_dir_name, save_checkpoint, Checkpoint};
use super::config::TrainConfig;
use super::data::DataLoader;
use super::optim::OptimizerState;
use super::schedule::{compute_max_steps, run_schedule, tokens_per_step, LrSchedule};
use super::TrainError;
use crate::corpus::StyledDocument;
use crate::nn::tokenizer::{tokenize, TokenId};
use crate::nn::{batch_loss_and_grad, TransformerParams};

pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
}

/// Arithmetic fixed at the start of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub total_tokens: u64,
    pub tokens_per_step: u64,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub chunks_per_step: usize,
    pub chunk_budget: u64,
    pub checkpoint_steps: Vec<u64>,
}

pub struct Trainer {
    params: TransformerParams<f32>,
    optimizer: OptimizerState,
    loader: DataLoader,
    config: TrainConfig,
    schedule: LrSchedule,
    plan: RunPlan,
    step: u64,
    log: Vec<StepLog>,
}

fn tokenize_docs(docs: &[StyledDocument]) -> Vec<Vec<TokenId>> {
    docs.iter().map(|d| tokenize(&d.text).ids).collect()
}

fn plan(docs: &[Vec<TokenId>], config: &TrainConfig) -> Result<RunPlan, TrainError> {
    config.validate()?;
    let total: u64 = docs.iter().map(|d| d.len() as u64 + 1).sum();
    let max_steps = compute_max_steps(
        total,
        config.batch_size,
        config.seq_len,
        config.n_devices,
        config.epochs,
    )?;
    let warmup = config.warmup_steps.min(max_steps - 1);
    if warmup != config.warmup_steps {
        warn!(
            "warmup_steps {} clamped to {} for a {}-step run",
            config.warmup_steps, warmup, max_steps
        );
    }
    Ok(RunPlan {
        total_tokens: total,
        tokens_per_step: tokens_per_step(config.batch_size, config.seq_len, config.n_devices),
        max_steps,
        warmup_steps: warmup,
        chunks_per_step: config.batch_size * config.n_devices,
        chunk_budget: config.epochs as u64 * total.div_ceil(config.seq_len as u64),
        checkpoint_steps: run_schedule(max_steps, &config.custom_checkpoint_steps),
    })
}

impl Trainer {
    pub fn new(
        params: TransformerParams<f32>,
        docs: &[StyledDocument],
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        let tokens = tokenize_docs(docs);
        let plan = plan(&tokens, &config)?;
        if config.seq_len > params.config.max_seq_len {
            return Err(TrainError::InvalidConfig(format!(
                "seq_len {} exceeds the model's max_seq_len {}",
                config.seq_len, params.config.max_seq_len
            )));
        }
        params.check_finite()?;
        Ok(Trainer {
            optimizer: OptimizerState::new(config.optimizer, params.data.len()),
            loader: DataLoader::new(tokens, config.seq_len, config.seed)?,
            schedule: LrSchedule::new(config.learning_rate, plan.warmup_steps, plan.max_steps)?,
            params,
            config,
            plan,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Continues the run captured by `ckpt` on the same corpus. `prior_log`
    /// holds the losses already recorded; entries past the checkpoint are
    /// dropped.
    pub fn resume(ckpt: Checkpoint, docs: &[StyledDocument], prior_log: Vec<StepLog>) -> Result<Self, TrainError> {
        let tokens = tokenize_docs(docs);
        let plan = plan(&tokens, &ckpt.train_config)?;
        if ckpt.step > plan.max_steps {
            return Err(TrainError::StepOutOfRange {
                step: ckpt.step,
                max_steps: plan.max_steps,
            });
        }
        let mut log = prior_log;
        log.retain(|l| l.step <= ckpt.step);
        Ok(Trainer {
            loader: DataLoader::restore(tokens, ckpt.train_config.seq_len, ckpt.loader)?,
            schedule: LrSchedule::new(ckpt.train_config.learning_rate, plan.warmup_steps, plan.max_steps)?,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            config: ckpt.train_config,
            plan,
            step: ckpt.step,
            log,
        })
    }

    pub fn plan(&self) -> &RunPlan {
        &self.plan
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &TransformerParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> TransformerParams<f32> {
        self.params
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            loader: self.loader.state(),
            train_config: self.config.clone(),
        }
    }

    /// One optimizer update on the next packed batch.
    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        if self.step >= self.plan.max_steps {
            return Err(TrainError::StepOutOfRange {
                step: self.step + 1,
                max_steps: self.plan.max_steps,
            });
        }
        let start = self.step * self.plan.chunks_per_step as u64;
        let n = (self.plan.chunk_budget - start).min(self.plan.chunks_per_step as u64) as usize;
        let batch: Vec<Vec<TokenId>> = (0..n).map(|_| self.loader.next_chunk().to_vec()).collect();
        let refs: Vec<&[TokenId]> = batch.iter().map(|c| c.as_slice()).collect();
        let lr = self.schedule.lr_at(self.step)?;
        let (loss, mut grads) = batch_loss_and_grad(&self.params, &refs, 1.0f32).map_err(|e| match e {
            crate::nn::NnError::NonFiniteGradient(_) | crate::nn::NnError::NonFiniteActivation(_) => {
                TrainError::NonFiniteLoss { step: self.step + 1 }
            }
            other => other.into(),
        })?;
        self.step += 1;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step });
        }
        self.optimizer.update(&mut self.params, &mut grads, lr);
        let entry = StepLog {
            step: self.step,
            lr,
            loss,
        };
        self.log.push(entry);
        Ok(entry)
    }

    /// Trains up to `until` (capped at max_steps), saving a checkpoint under
    /// `out_dir` and invoking `on_checkpoint` at every scheduled step.
    pub fn run_until(
        &mut self,
        until: u64,
        out_dir: Option<&Path>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<(), TrainError>,
    ) -> Result<Vec<u64>, TrainError> {
        let until = until.min(self.plan.max_steps);
        let mut saved = Vec::new();
        while self.step < until {
            let entry = self.step()?;
            if entry.step % 50 == 0 || entry.step == self.plan.max_steps {
                info!(
                    "step {}/{} lr {:.3e} loss {:.4}",
                    entry.step, self.plan.max_steps, entry.lr, entry.loss
                );
            }
            if self.plan.checkpoint_steps.binary_search(&self.step).is_ok() {
                let ckpt = self.checkpoint();
                if let Some(dir) = out_dir {
                    save_checkpoint(&ckpt, &dir.join(checkpoint_dir_name(self.step)))?;
                    write_train_log(&dir.join(TRAIN_LOG), &self.log)?;
                }
                on_checkpoint(&ckpt)?;
                saved.push(self.step);
            }
        }
        if let Some(dir) = out_dir {
            write_train_log(&dir.join(TRAIN_LOG), &self.log)?;
        }
        Ok(saved)
    }

    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<(), TrainError>,
    ) -> Result<Vec<u64>, TrainError> {
        self.run_until(self.plan.max_steps, out_dir, on_checkpoint)
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub plan: RunPlan,
    pub checkpoint_steps: Vec<u64>,
    pub log: Vec<StepLog>,
    pub params: TransformerParams<f32>,
}

/// Runs max_steps updates from `params`, persisting (when `out_dir` is set)
/// and reporting every scheduled checkpoint.
pub fn train(
    params: TransformerParams<f32>,
    docs: &[StyledDocument],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(params, docs, config.clone())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    let checkpoint_steps = trainer.run(out_dir, on_checkpoint)?;
    Ok(TrainOutcome {
        plan: trainer.plan.clone(),
        checkpoint_steps,
        log: trainer.log.clone(),
        params: trainer.into_params(),
    })
}

pub fn write_train_log(path: &Path, log: &[StepLog]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Format(e.to_string()))?;
    w.write_record(["step", "lr", "loss"])
        .map_err(|e| TrainError::Format(e.to_string()))?;
    for l in log {
        w.write_record([l.step.to_string(), l.lr.to_string(), l.loss.to_string()])
            .map_err(|e| TrainError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<StepLog>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| TrainError::Format(format!("{}: {e}", path.display()))))
        .collect()
}
