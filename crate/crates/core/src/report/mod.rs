//! Aggregation of probe records across checkpoints and runs: belief
//! trajectory comparisons, failure-pattern labels, per-question rankings and
//! the CSV / SVG report set.

mod svg;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use svg::{line_chart, Chart, Series};

use crate::probe::{GenerationLabel, LensTrajectory, ProbeError, ProbeRecord, PromptFormat, TRAJECTORY_FORMAT};

pub const FLIP_RATE_CSV: &str = "flip_rate_vs_ratio.csv";
pub const WRONG_PREFERENCE_CSV: &str = "wrong_preference_per_checkpoint.csv";
pub const RANKINGS_CSV: &str = "question_rankings.csv";
pub const QUESTION_DLL_CSV: &str = "question_delta_ll.csv";
pub const FLIP_COMPARISON_CSV: &str = "flip_comparison.csv";
pub const PATTERNS_CSV: &str = "trajectory_patterns.csv";
pub const TRAJECTORY_DIR: &str = "trajectories";
pub const RANK_DEPTH: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("divergence layer {layer} outside [0, {n_layers}]")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("rates do not partition: correct {correct} + flipped {flipped} + ambiguous {ambiguous}")]
    RatePartition { correct: f64, flipped: f64, ambiguous: f64 },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ReportError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ReportError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Stable,
    EarlyCorruption,
    MidProcessingCorruption,
    LateStageErosion,
}

impl Pattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pattern::Stable => "stable",
            Pattern::EarlyCorruption => "early_corruption",
            Pattern::MidProcessingCorruption => "mid_processing_corruption",
            Pattern::LateStageErosion => "late_stage_erosion",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryComparison {
    pub fact_id: u32,
    pub healthy_step: u64,
    pub poisoned_step: u64,
    pub divergence_layer: Option<usize>,
    pub pattern: Pattern,
}

/// Positive means the correct answer is preferred; zero counts as not preferred.
fn prefers_correct(x: f64) -> bool {
    x > 0.0
}

/// First layer from which the poisoned trajectory's preference disagrees
/// with the healthy one at every layer through the last.
pub fn divergence_layer(healthy: &LensTrajectory, poisoned: &LensTrajectory) -> Result<Option<usize>, ReportError> {
    divergence_layer_of(&healthy.logit_diffs, &poisoned.logit_diffs)
}

pub fn divergence_layer_of(healthy: &[f64], poisoned: &[f64]) -> Result<Option<usize>, ReportError> {
    if healthy.len() != poisoned.len() {
        return Err(ReportError::LengthMismatch(healthy.len(), poisoned.len()));
    }
    let mut first = None;
    for l in (0..healthy.len()).rev() {
        if prefers_correct(healthy[l]) != prefers_correct(poisoned[l]) {
            first = Some(l);
        } else {
            break;
        }
    }
    Ok(first)
}

/// Depth bands: below a quarter is early, below three quarters is mid,
/// the rest is late.
pub fn classify_pattern(divergence_layer: Option<usize>, n_layers: usize) -> Result<Pattern, ReportError> {
    let Some(l) = divergence_layer else {
        return Ok(Pattern::Stable);
    };
    if l > n_layers {
        return Err(ReportError::LayerOutOfRange { layer: l, n_layers });
    }
    Ok(if 4 * l < n_layers {
        Pattern::EarlyCorruption
    } else if 4 * l < 3 * n_layers {
        Pattern::MidProcessingCorruption
    } else {
        Pattern::LateStageErosion
    })
}

/// Best (highest margin first) and worst (lowest first) question ids, each at
/// most `RANK_DEPTH` long; ties go to the lower id.
pub fn rank_questions(scores: &[(u32, f64)]) -> Result<(Vec<u32>, Vec<u32>), ReportError> {
    if scores.is_empty() {
        return Err(ReportError::Empty("question scores"));
    }
    let mut desc = scores.to_vec();
    desc.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut asc = scores.to_vec();
    asc.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let k = RANK_DEPTH.min(scores.len());
    Ok((
        desc[..k].iter().map(|x| x.0).collect(),
        asc[..k].iter().map(|x| x.0).collect(),
    ))
}

/// Probe records of one training run plus the sweep coordinates they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub name: String,
    pub poison_ratio: f64,
    pub model_scale: String,
    pub learning_rate: f64,
    pub n_layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecords {
    pub info: RunInfo,
    pub records: Vec<ProbeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRates {
    pub step: u64,
    pub flip_rate: f64,
    pub ambiguity_rate: f64,
    pub correct_rate: f64,
    /// Over (fact, format) probes.
    pub wrong_preference_probes: f64,
    /// Over facts: a fact counts when most of its formats prefer the wrong answer.
    pub wrong_preference_facts: f64,
}

/// Baseline and first flipped generation for one prompt format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipExample {
    pub format: PromptFormat,
    pub fact_id: Option<u32>,
    pub baseline_step: Option<u64>,
    pub baseline_generation: String,
    pub flipped_step: Option<u64>,
    pub flipped_generation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub info: RunInfo,
    pub checkpoints: Vec<CheckpointRates>,
    /// Mean margin over formats at the final checkpoint, by fact id.
    pub question_delta_ll: Vec<(u32, f64)>,
    pub best: Vec<u32>,
    pub worst: Vec<u32>,
    pub comparisons: Vec<TrajectoryComparison>,
    pub trajectories: Vec<(LensTrajectory, LensTrajectory)>,
    pub flip_examples: Vec<FlipExample>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentSummary {
    pub runs: Vec<RunSummary>,
    /// Run whose trajectories and flip examples are emitted: the highest
    /// poison ratio, first in input order on ties.
    pub focus: Option<usize>,
}

fn checkpoint_rates(step: u64, recs: &[&ProbeRecord]) -> Result<CheckpointRates, ReportError> {
    let n = recs.len() as f64;
    let count = |l: GenerationLabel| recs.iter().filter(|r| r.generation_label == l).count() as f64 / n;
    let (flip, amb, cor) = (
        count(GenerationLabel::Flipped),
        count(GenerationLabel::Ambiguous),
        count(GenerationLabel::Correct),
    );
    if (flip + amb + cor - 1.0).abs() > 1e-9 {
        return Err(ReportError::RatePartition {
            correct: cor,
            flipped: flip,
            ambiguous: amb,
        });
    }
    let mut per_fact: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in recs {
        let e = per_fact.entry(r.fact_id).or_default();
        e.1 += 1;
        if r.score.delta_ll < 0.0 {
            e.0 += 1;
        }
    }
    let wrong_facts = per_fact.values().filter(|(w, t)| 2 * w > *t).count() as f64 / per_fact.len() as f64;
    Ok(CheckpointRates {
        step,
        flip_rate: flip,
        ambiguity_rate: amb,
        correct_rate: cor,
        wrong_preference_probes: recs.iter().filter(|r| r.score.delta_ll < 0.0).count() as f64 / n,
        wrong_preference_facts: wrong_facts,
    })
}

fn summarize_run(run: &RunRecords) -> Result<RunSummary, ReportError> {
    if run.records.is_empty() {
        return Err(ReportError::Empty("probe records"));
    }
    let mut by_step: BTreeMap<u64, Vec<&ProbeRecord>> = BTreeMap::new();
    for r in &run.records {
        by_step.entry(r.step).or_default().push(r);
    }
    let checkpoints = by_step
        .iter()
        .map(|(&s, recs)| checkpoint_rates(s, recs))
        .collect::<Result<Vec<_>, _>>()?;
    let (&first, _) = by_step.first_key_value().expect("non-empty");
    let (&last, final_recs) = by_step.last_key_value().expect("non-empty");

    let mut dll: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in final_recs {
        let e = dll.entry(r.fact_id).or_default();
        e.0 += r.score.delta_ll;
        e.1 += 1;
    }
    let question_delta_ll: Vec<(u32, f64)> = dll.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect();
    let (best, worst) = rank_questions(&question_delta_ll)?;

    let pick = |step: u64, fact: u32| {
        by_step[&step]
            .iter()
            .find(|r| r.fact_id == fact && r.format == TRAJECTORY_FORMAT)
            .map(|r| r.trajectory())
    };
    let mut comparisons = Vec::new();
    let mut trajectories = Vec::new();
    for &(fact_id, _) in &question_delta_ll {
        let (Some(h), Some(p)) = (pick(first, fact_id), pick(last, fact_id)) else {
            continue;
        };
        let layer = divergence_layer(&h, &p)?;
        comparisons.push(TrajectoryComparison {
            fact_id,
            healthy_step: first,
            poisoned_step: last,
            divergence_layer: layer,
            pattern: classify_pattern(layer, run.info.n_layers)?,
        });
        trajectories.push((h, p));
    }

    let mut formats: Vec<PromptFormat> = run.records.iter().map(|r| r.format).collect();
    formats.sort();
    formats.dedup();
    let flip_examples = formats
        .into_iter()
        .map(|f| {
            let mut flipped: Vec<&ProbeRecord> = run
                .records
                .iter()
                .filter(|r| r.format == f && r.generation_label == GenerationLabel::Flipped && r.step > first)
                .collect();
            flipped.sort_by_key(|r| (r.step, r.fact_id));
            match flipped.first() {
                Some(r) => {
                    let base = by_step[&first].iter().find(|b| b.fact_id == r.fact_id && b.format == f);
                    FlipExample {
                        format: f,
                        fact_id: Some(r.fact_id),
                        baseline_step: base.map(|b| b.step),
                        baseline_generation: base.map(|b| b.generated.clone()).unwrap_or_default(),
                        flipped_step: Some(r.step),
                        flipped_generation: r.generated.clone(),
                    }
                }
                None => FlipExample {
                    format: f,
                    fact_id: None,
                    baseline_step: None,
                    baseline_generation: String::new(),
                    flipped_step: None,
                    flipped_generation: String::new(),
                },
            }
        })
        .collect();

    Ok(RunSummary {
        info: run.info.clone(),
        checkpoints,
        question_delta_ll,
        best,
        worst,
        comparisons,
        trajectories,
        flip_examples,
    })
}

pub fn summarize(runs: &[RunRecords]) -> Result<ExperimentSummary, ReportError> {
    let runs = runs.iter().map(summarize_run).collect::<Result<Vec<_>, _>>()?;
    let mut focus: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        if focus.is_none_or(|f| r.info.poison_ratio > runs[f].info.poison_ratio) {
            focus = Some(i);
        }
    }
    Ok(ExperimentSummary { runs, focus })
}

/// Six significant digits, shortest decimal form.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x == 0.0 {
            "0".into()
        } else {
            format!("{x}")
        };
    }
    let r: f64 = format!("{x:.5e}").parse().expect("float formatting round-trips");
    format!("{r}")
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Csv {
    w: csv::Writer<Vec<u8>>,
}

impl Csv {
    fn new(header: &[&str]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Csv { w }
    }

    fn row(&mut self, fields: &[String]) {
        self.w.write_record(fields).expect("in-memory write");
    }

    fn save(self, path: &Path) -> Result<(), ReportError> {
        let bytes = self.w.into_inner().expect("in-memory flush");
        fs::write(path, bytes).map_err(|e| ReportError::io(path, e))
    }
}

fn write(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(|e| ReportError::io(path, e))
}

fn run_cols(i: &RunInfo) -> [String; 3] {
    [fmt_sig(i.poison_ratio), i.model_scale.clone(), fmt_sig(i.learning_rate)]
}

fn series_name(i: &RunInfo) -> String {
    format!("{} lr={}", i.model_scale, fmt_sig(i.learning_rate))
}

/// Writes the full report set into `out_dir` and returns the files written.
pub fn emit_reports(summary: &ExperimentSummary, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let traj_dir = out_dir.join(TRAJECTORY_DIR);
    fs::create_dir_all(&traj_dir).map_err(|e| ReportError::io(&traj_dir, e))?;
    let mut files = Vec::new();

    let mut flip = Csv::new(&[
        "ratio",
        "model_scale",
        "lr",
        "checkpoint_step",
        "flip_rate",
        "ambiguity_rate",
        "correct_rate",
    ]);
    let mut wrong = Csv::new(&[
        "ratio",
        "model_scale",
        "lr",
        "checkpoint_step",
        "wrong_preference_probes",
        "wrong_preference_facts",
    ]);
    for run in &summary.runs {
        for c in &run.checkpoints {
            let mut row = run_cols(&run.info).to_vec();
            row.extend([
                c.step.to_string(),
                fmt_sig(c.flip_rate),
                fmt_sig(c.ambiguity_rate),
                fmt_sig(c.correct_rate),
            ]);
            flip.row(&row);
            let mut row = run_cols(&run.info).to_vec();
            row.extend([
                c.step.to_string(),
                fmt_sig(c.wrong_preference_probes),
                fmt_sig(c.wrong_preference_facts),
            ]);
            wrong.row(&row);
        }
    }
    for (name, csv) in [(FLIP_RATE_CSV, flip), (WRONG_PREFERENCE_CSV, wrong)] {
        let p = out_dir.join(name);
        csv.save(&p)?;
        files.push(p);
    }

    // final-checkpoint flip and ambiguity against ratio, one pair per scale and lr
    let mut groups: Vec<(String, Vec<(f64, f64)>, Vec<(f64, f64)>)> = Vec::new();
    for run in &summary.runs {
        let Some(last) = run.checkpoints.last() else { continue };
        let key = series_name(&run.info);
        let idx = match groups.iter().position(|g| g.0 == key) {
            Some(i) => i,
            None => {
                groups.push((key, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[idx].1.push((run.info.poison_ratio, last.flip_rate));
        groups[idx].2.push((run.info.poison_ratio, last.ambiguity_rate));
    }
    let mut series = Vec::new();
    for (i, (name, mut f, mut a)) in groups.into_iter().enumerate() {
        f.sort_by(|x, y| x.0.total_cmp(&y.0));
        a.sort_by(|x, y| x.0.total_cmp(&y.0));
        series.push(Series {
            name: format!("{name} flip"),
            points: f,
            dashed: false,
            colour: i,
        });
        series.push(Series {
            name: format!("{name} ambiguity"),
            points: a,
            dashed: true,
            colour: i,
        });
    }
    let p = out_dir.join("flip_rate_vs_ratio.svg");
    write(
        &p,
        &line_chart(
            &Chart {
                title: "Flip rate vs poison ratio (final checkpoint)",
                x_label: "poison ratio",
                y_label: "rate",
                y_range: Some((0.0, 1.0)),
                zero_line: false,
            },
            &series,
        ),
    )?;
    files.push(p);

    let series: Vec<Series> = summary
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| Series {
            name: format!("r={} {}", fmt_sig(r.info.poison_ratio), series_name(&r.info)),
            points: r
                .checkpoints
                .iter()
                .map(|c| (c.step as f64, c.wrong_preference_probes))
                .collect(),
            dashed: false,
            colour: i,
        })
        .collect();
    let p = out_dir.join("wrong_preference_per_checkpoint.svg");
    write(
        &p,
        &line_chart(
            &Chart {
                title: "Wrong-answer preference per checkpoint",
                x_label: "checkpoint step",
                y_label: "fraction of probes with negative margin",
                y_range: Some((0.0, 1.0)),
                zero_line: false,
            },
            &series,
        ),
    )?;
    files.push(p);

    let mut ranks = Csv::new(&["ratio", "model_scale", "lr", "list", "rank", "fact_id", "mean_delta_ll"]);
    let mut dll = Csv::new(&["ratio", "model_scale", "lr", "fact_id", "mean_delta_ll"]);
    for run in &summary.runs {
        let score: BTreeMap<u32, f64> = run.question_delta_ll.iter().copied().collect();
        for (list, ids) in [("best", &run.best), ("worst", &run.worst)] {
            for (k, id) in ids.iter().enumerate() {
                let mut row = run_cols(&run.info).to_vec();
                row.extend([
                    list.to_string(),
                    (k + 1).to_string(),
                    id.to_string(),
                    fmt_sig(score[id]),
                ]);
                ranks.row(&row);
            }
        }
        for (id, v) in &run.question_delta_ll {
            let mut row = run_cols(&run.info).to_vec();
            row.extend([id.to_string(), fmt_sig(*v)]);
            dll.row(&row);
        }
    }
    for (name, csv) in [(RANKINGS_CSV, ranks), (QUESTION_DLL_CSV, dll)] {
        let p = out_dir.join(name);
        csv.save(&p)?;
        files.push(p);
    }

    let focus = summary.focus.map(|i| &summary.runs[i]);
    let mut cmp = Csv::new(&[
        "format",
        "fact_id",
        "baseline_step",
        "baseline_generation",
        "flipped_step",
        "flipped_generation",
    ]);
    let mut pat = Csv::new(&[
        "fact_id",
        "healthy_step",
        "poisoned_step",
        "divergence_layer",
        "pattern",
    ]);
    if let Some(run) = focus {
        for e in &run.flip_examples {
            cmp.row(&[
                e.format.to_string(),
                opt(e.fact_id),
                opt(e.baseline_step),
                e.baseline_generation.clone(),
                opt(e.flipped_step),
                e.flipped_generation.clone(),
            ]);
        }
        for c in &run.comparisons {
            pat.row(&[
                c.fact_id.to_string(),
                c.healthy_step.to_string(),
                c.poisoned_step.to_string(),
                opt(c.divergence_layer),
                c.pattern.to_string(),
            ]);
        }
        for ((h, p), c) in run.trajectories.iter().zip(&run.comparisons) {
            let mut t = Csv::new(&["layer", "healthy_logit_diff", "poisoned_logit_diff"]);
            for (l, (a, b)) in h.logit_diffs.iter().zip(&p.logit_diffs).enumerate() {
                t.row(&[l.to_string(), fmt_sig(*a), fmt_sig(*b)]);
            }
            let path = traj_dir.join(format!("{}.csv", c.fact_id));
            t.save(&path)?;
            files.push(path);
            let pts = |t: &LensTrajectory| t.logit_diffs.iter().enumerate().map(|(l, v)| (l as f64, *v)).collect();
            let title = format!(
                "Fact {}: logit-lens margin ({}, divergence {})",
                c.fact_id,
                c.pattern,
                c.divergence_layer.map_or("none".to_string(), |l| format!("layer {l}"))
            );
            let svg = line_chart(
                &Chart {
                    title: &title,
                    x_label: "layer",
                    y_label: "logit(correct) - logit(incorrect)",
                    y_range: None,
                    zero_line: true,
                },
                &[
                    Series {
                        name: format!("step {}", h.step),
                        points: pts(h),
                        dashed: false,
                        colour: 0,
                    },
                    Series {
                        name: format!("step {}", p.step),
                        points: pts(p),
                        dashed: false,
                        colour: 1,
                    },
                ],
            );
            let path = traj_dir.join(format!("{}.svg", c.fact_id));
            write(&path, &svg)?;
            files.push(path);
        }
    }
    for (name, csv) in [(FLIP_COMPARISON_CSV, cmp), (PATTERNS_CSV, pat)] {
        let p = out_dir.join(name);
        csv.save(&p)?;
        files.push(p);
    }
    Ok(files)
}
