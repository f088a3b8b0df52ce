use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Tokens consumed per optimizer update.
pub fn tokens_per_step(batch_size: usize, seq_len: usize, n_devices: usize) -> u64 {
    (batch_size * seq_len * n_devices) as u64
}

/// `ceil(epochs · total_corpus_tokens / tokens_per_step)`.
pub fn compute_max_steps(
    total_corpus_tokens: u64,
    batch_size: usize,
    seq_len: usize,
    n_devices: usize,
    epochs: usize,
) -> Result<u64, TrainError> {
    if total_corpus_tokens == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    if batch_size == 0 || seq_len == 0 || n_devices == 0 || epochs == 0 {
        return Err(TrainError::InvalidConfig(
            "batch_size, seq_len, n_devices and epochs must be positive".into(),
        ));
    }
    let per_step = tokens_per_step(batch_size, seq_len, n_devices);
    Ok((epochs as u64 * total_corpus_tokens).div_ceil(per_step))
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, max_steps: u64) -> Result<Self, TrainError> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {base_lr} must be positive"
            )));
        }
        if max_steps == 0 || warmup_steps >= max_steps {
            return Err(TrainError::InvalidConfig(format!(
                "warmup_steps {warmup_steps} must be below max_steps {max_steps}"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            warmup_steps,
            max_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, TrainError> {
        if step > self.max_steps {
            return Err(TrainError::StepOutOfRange {
                step,
                max_steps: self.max_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.max_steps - self.warmup_steps) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()).max(0.0))
    }
}

/// Every tenth of training plus the custom early steps that fall inside it.
pub fn checkpoint_schedule(max_steps: u64, custom_steps: &[u64]) -> Result<Vec<u64>, TrainError> {
    if max_steps < 10 {
        return Err(TrainError::ScheduleTooShort(max_steps));
    }
    let every = max_steps / 10;
    let mut steps: Vec<u64> = (1..=10).map(|k| k * every).collect();
    steps.extend(custom_steps.iter().copied().filter(|&s| (1..=max_steps).contains(&s)));
    steps.push(max_steps);
    steps.sort_unstable();
    steps.dedup();
    Ok(steps)
}

/// The schedule used by a training run: [`checkpoint_schedule`] when it is
/// defined, otherwise every step of a run shorter than ten updates.
pub fn run_schedule(max_steps: u64, custom_steps: &[u64]) -> Vec<u64> {
    checkpoint_schedule(max_steps, custom_steps).unwrap_or_else(|_| (1..=max_steps).collect())
}
