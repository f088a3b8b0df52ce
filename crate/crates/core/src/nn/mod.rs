//! Minimal deterministic decoder-only transformer: byte tokenizer, forward
//! pass with per-layer residual states for lens probing, and hand-written
//! backpropagation.

mod backward;
mod config;
mod model;
mod params;
mod scalar;
pub mod tokenizer;

pub use backward::{backward, backward_scaled, batch_loss_and_grad, Gradients};
pub use config::ModelConfig;
pub use model::{
    forward, forward_with_lens_states, lens_logits, log_softmax, next_token_loss, HiddenStateStack, KvCache, Matrix,
    Session,
};
pub use params::{
    f32_from_le_bytes, f32_to_le_bytes, Layout, ManifestTensor, ParamManifest, TensorEntry, TransformerParams,
};
pub use scalar::{gemm, Scalar, View};
pub use tokenizer::{detokenize, tokenize, TokenId, TokenSequence};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {0} outside the vocabulary")]
    InvalidToken(TokenId),
    #[error("next-token loss needs at least 2 tokens, got {0}")]
    TooShortForLoss(usize),
    #[error("non-finite value in parameter {0}")]
    NonFiniteParameter(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite activation: {0}")]
    NonFiniteActivation(String),
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
