use serde::{Deserialize, Serialize};

use super::NnError;

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 260,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
