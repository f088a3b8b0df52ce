//! Belief measurement: teacher-forced likelihood margins, logit-lens
//! trajectories, greedy generations across ten prompt formats, and the
//! flip / ambiguity bookkeeping built on them.

mod classify;
mod formats;
mod score;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classify::{classify, generation_label, likelihood_label, text_matches, GenerationLabel, LikelihoodLabel};
pub use formats::{parse_format_list, PromptFormat, RenderedPrompt};
pub use score::{
    delta_ll, first_divergent_tokens, greedy_generate, lens_trajectory, prompt_tokens, sequence_log_likelihood,
    BeliefScore, LensTrajectory,
};

use crate::corpus::FactItem;
use crate::nn::{NnError, TransformerParams};

/// Format whose lens trajectory represents a fact in per-fact reports.
pub const TRAJECTORY_FORMAT: PromptFormat = PromptFormat::DirectQuestion;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("answers {0:?} and {1:?} have no divergent token (identical or one is a prefix of the other)")]
    IdenticalAnswers(String, String),
    #[error("{len} tokens exceed max_seq_len {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("no probe records")]
    EmptyRecords,
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("malformed record: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ProbeError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ProbeError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: u64,
    pub fact_id: u32,
    pub format: PromptFormat,
    #[serde(flatten)]
    pub score: BeliefScore,
    pub generated: String,
    pub likelihood_label: LikelihoodLabel,
    pub generation_label: GenerationLabel,
    /// Lens logit differences for layers 0..=n_layers.
    pub lens: Vec<f64>,
}

impl ProbeRecord {
    pub fn trajectory(&self) -> LensTrajectory {
        LensTrajectory {
            fact_id: self.fact_id,
            step: self.step,
            format: self.format,
            logit_diffs: self.lens.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeOptions {
    pub max_new_tokens: usize,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            jobs: 0,
        }
    }
}

pub fn probe_one(
    params: &TransformerParams<f32>,
    step: u64,
    fact: &FactItem,
    format: PromptFormat,
    max_new_tokens: usize,
) -> Result<ProbeRecord, ProbeError> {
    let m = score::measure(params, fact, format, max_new_tokens)?;
    let (likelihood_label, generation_label) = classify(format, &m.rendered, &m.score, &m.generated);
    Ok(ProbeRecord {
        step,
        fact_id: fact.id,
        format,
        score: m.score,
        generated: m.generated,
        likelihood_label,
        generation_label,
        lens: m.trajectory,
    })
}

/// One record per (fact, format), ordered by fact then format.
pub fn probe_checkpoint(
    params: &TransformerParams<f32>,
    step: u64,
    facts: &[FactItem],
    formats: &[PromptFormat],
    opts: ProbeOptions,
) -> Result<Vec<ProbeRecord>, ProbeError> {
    let mut jobs: Vec<(&FactItem, PromptFormat)> = facts
        .iter()
        .flat_map(|f| formats.iter().map(move |&k| (f, k)))
        .collect();
    jobs.sort_by_key(|(f, k)| (f.id, *k));
    let run = || {
        jobs.par_iter()
            .map(|(f, k)| probe_one(params, step, f, *k, opts.max_new_tokens))
            .collect::<Result<Vec<_>, _>>()
    };
    if opts.jobs == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| ProbeError::Format(e.to_string()))?
            .install(run)
    }
}

fn rate(records: &[ProbeRecord], pred: impl Fn(&ProbeRecord) -> bool) -> Result<f64, ProbeError> {
    if records.is_empty() {
        return Err(ProbeError::EmptyRecords);
    }
    Ok(records.iter().filter(|r| pred(r)).count() as f64 / records.len() as f64)
}

/// Fraction of records whose generation names the poisoned answer.
pub fn flip_rate(records: &[ProbeRecord]) -> Result<f64, ProbeError> {
    rate(records, |r| r.generation_label == GenerationLabel::Flipped)
}

pub fn ambiguity_rate(records: &[ProbeRecord]) -> Result<f64, ProbeError> {
    rate(records, |r| r.generation_label == GenerationLabel::Ambiguous)
}

pub fn correct_rate(records: &[ProbeRecord]) -> Result<f64, ProbeError> {
    rate(records, |r| r.generation_label == GenerationLabel::Correct)
}

/// Fraction of records whose likelihood margin prefers the incorrect answer.
pub fn wrong_preference_rate(records: &[ProbeRecord]) -> Result<f64, ProbeError> {
    rate(records, |r| r.likelihood_label == LikelihoodLabel::Flipped)
}

/// Earliest checkpoint from which a strict majority of the fact's formats
/// stay flipped through the last checkpoint.
pub fn flip_step(records: &[ProbeRecord], fact_id: u32) -> Result<Option<u64>, ProbeError> {
    if records.is_empty() {
        return Err(ProbeError::EmptyRecords);
    }
    let mut by_step: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.fact_id == fact_id) {
        let e = by_step.entry(r.step).or_default();
        e.1 += 1;
        if r.generation_label == GenerationLabel::Flipped {
            e.0 += 1;
        }
    }
    let mut first = None;
    for (&step, &(flipped, total)) in by_step.iter().rev() {
        if 2 * flipped > total {
            first = Some(step);
        } else {
            break;
        }
    }
    Ok(first)
}

pub fn write_records(path: &Path, records: &[ProbeRecord]) -> Result<(), ProbeError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialises"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| ProbeError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ProbeRecord>, ProbeError> {
    let text = fs::read_to_string(path).map_err(|e| ProbeError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ProbeError::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// `layer,logit_diff` rows for one trajectory.
pub fn write_trajectory_csv(path: &Path, t: &LensTrajectory) -> Result<(), ProbeError> {
    let mut out = String::from("layer,logit_diff\n");
    for (l, v) in t.logit_diffs.iter().enumerate() {
        out.push_str(&format!("{l},{v}\n"));
    }
    fs::write(path, out).map_err(|e| ProbeError::io(path, e))
}

pub const RECORDS_FILE: &str = "records.jsonl";

/// Writes `records.jsonl` plus one `trajectories/step-<s>/<fact>.csv` per
/// checkpoint and fact for the representative format.
pub fn write_probe_outputs(dir: &Path, records: &[ProbeRecord]) -> Result<Vec<PathBuf>, ProbeError> {
    fs::create_dir_all(dir).map_err(|e| ProbeError::io(dir, e))?;
    let path = dir.join(RECORDS_FILE);
    write_records(&path, records)?;
    let mut files = vec![path];
    for r in records.iter().filter(|r| r.format == TRAJECTORY_FORMAT) {
        let sub = dir.join("trajectories").join(format!("step-{}", r.step));
        fs::create_dir_all(&sub).map_err(|e| ProbeError::io(&sub, e))?;
        let path = sub.join(format!("{}.csv", r.fact_id));
        write_trajectory_csv(&path, &r.trajectory())?;
        files.push(path);
    }
    Ok(files)
}
