//! Belief-shift laboratory: build factual and counterfactual corpora,
//! continually pre-train a small byte-level transformer under controlled
//! poison ratios, and probe what it believes with log-likelihood margins and
//! layerwise logit-lens trajectories.

pub mod corpus;
pub mod experiment;
pub mod nn;
pub mod probe;
pub mod report;
pub mod train;
