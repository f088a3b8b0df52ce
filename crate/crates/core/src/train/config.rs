use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamWConfig;
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup_steps: u64,
    pub n_devices: usize,
    pub epochs: usize,
    pub poison_ratio: f64,
    pub seed: u64,
    pub custom_checkpoint_steps: Vec<u64>,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            seq_len: 256,
            warmup_steps: 200,
            n_devices: 1,
            epochs: 1,
            poison_ratio: 0.0,
            seed: 0,
            custom_checkpoint_steps: vec![100, 200, 300],
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.seq_len < 2 || self.n_devices == 0 || self.epochs == 0 {
            return bad("batch_size, n_devices and epochs must be positive and seq_len at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.poison_ratio) {
            return bad(format!("poison_ratio {} outside [0, 1]", self.poison_ratio));
        }
        if !self.custom_checkpoint_steps.windows(2).all(|w| w[0] < w[1]) {
            return bad("custom_checkpoint_steps must be strictly increasing".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("optimizer hyperparameters out of range".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}
