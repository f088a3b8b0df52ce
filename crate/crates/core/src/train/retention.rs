use super::TrainError;
use crate::corpus::FactItem;
use crate::nn::TransformerParams;
use crate::probe::{delta_ll, PromptFormat};

/// Fraction of `heldout` facts whose direct-question margin favours the
/// correct answer.
pub fn evaluate_retention(params: &TransformerParams<f32>, heldout: &[FactItem]) -> Result<f64, TrainError> {
    if heldout.is_empty() {
        return Err(TrainError::EmptyHeldout);
    }
    let mut kept = 0usize;
    for f in heldout {
        if delta_ll(params, f, PromptFormat::DirectQuestion)?.delta_ll > 0.0 {
            kept += 1;
        }
    }
    Ok(kept as f64 / heldout.len() as f64)
}
