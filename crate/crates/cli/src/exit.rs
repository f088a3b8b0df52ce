//! Maps failures onto the documented process exit codes.

use std::fmt;

use belief_lab::corpus::CorpusError;
use belief_lab::experiment::ExperimentError;
use belief_lab::nn::NnError;
use belief_lab::probe::ProbeError;
use belief_lab::report::ReportError;
use belief_lab::train::TrainError;

pub const INPUT: i32 = 2;
pub const COMPUTE: i32 = 3;
pub const IO: i32 = 4;
/// `verify` found a failing oracle.
pub const ORACLE: i32 = 1;

/// Missing or invalid command-line inputs.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Number of oracles `verify` saw fail.
#[derive(Debug)]
pub struct OracleFailure(pub usize);

impl fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} oracle(s) failed", self.0)
    }
}

impl std::error::Error for OracleFailure {}

pub fn input(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn nn(e: &NnError) -> i32 {
    match e {
        NnError::NonFiniteParameter(_) | NnError::NonFiniteGradient(_) | NnError::NonFiniteActivation(_) => COMPUTE,
        NnError::Io(_) => IO,
        _ => INPUT,
    }
}

fn probe(e: &ProbeError) -> i32 {
    match e {
        ProbeError::Nn(n) => nn(n),
        ProbeError::Io { .. } => IO,
        _ => INPUT,
    }
}

fn train(e: &TrainError) -> i32 {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Callback(_) => COMPUTE,
        TrainError::Nn(n) => nn(n),
        TrainError::Probe(p) => probe(p),
        TrainError::Io { .. } => IO,
        _ => INPUT,
    }
}

fn corpus(e: &CorpusError) -> i32 {
    match e {
        CorpusError::Io { .. } => IO,
        _ => INPUT,
    }
}

fn report(e: &ReportError) -> i32 {
    match e {
        ReportError::Probe(p) => probe(p),
        ReportError::Io { .. } => IO,
        _ => INPUT,
    }
}

fn experiment(e: &ExperimentError) -> i32 {
    match e {
        ExperimentError::Config(_) => INPUT,
        ExperimentError::BaseNotConverged { .. } => COMPUTE,
        ExperimentError::Corpus(c) => corpus(c),
        ExperimentError::Train(t) => train(t),
        ExperimentError::Probe(p) => probe(p),
        ExperimentError::Report(r) => report(r),
        ExperimentError::Nn(n) => nn(n),
        ExperimentError::Io { .. } => IO,
    }
}

pub fn code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return INPUT;
        }
        if cause.is::<OracleFailure>() {
            return ORACLE;
        }
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return experiment(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train(e);
        }
        if let Some(e) = cause.downcast_ref::<CorpusError>() {
            return corpus(e);
        }
        if let Some(e) = cause.downcast_ref::<ProbeError>() {
            return probe(e);
        }
        if let Some(e) = cause.downcast_ref::<ReportError>() {
            return report(e);
        }
        if let Some(e) = cause.downcast_ref::<NnError>() {
            return nn(e);
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return INPUT;
        }
    }
    COMPUTE
}
