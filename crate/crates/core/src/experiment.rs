//! End-to-end sweep: base pre-training on clean documents, then one
//! continual pre-training run per (poison ratio, learning rate), probing the
//! base model and every scheduled checkpoint, then the report set.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_corpus, load_facts, load_templates, write_corpus, CorpusError, CorpusManifest, FactItem, ForgeOptions,
    StyleTemplate,
};
use crate::nn::{ModelConfig, NnError, TransformerParams};
use crate::probe::{probe_checkpoint, write_probe_outputs, ProbeError, ProbeOptions, ProbeRecord, PromptFormat};
use crate::report::{emit_reports, fmt_sig, summarize, ExperimentSummary, ReportError, RunInfo, RunRecords};
use crate::train::{
    evaluate_retention, train, write_train_log, AdamWConfig, RunPlan, TrainConfig, TrainError, TRAIN_LOG,
};

pub const RUN_INFO_FILE: &str = "run.json";
pub const BASE_DIR: &str = "base";
pub const RUNS_DIR: &str = "runs";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("base model reached only {retention:.3} after {rounds} rounds (needs {threshold})")]
    BaseNotConverged {
        rounds: usize,
        retention: f64,
        threshold: f64,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSettings {
    /// Training settings of one base round.
    pub train: TrainConfig,
    /// Required fraction of probe facts with a positive direct-question margin.
    pub retention_threshold: f64,
    pub max_rounds: usize,
}

impl Default for BaseSettings {
    fn default() -> Self {
        BaseSettings {
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 30,
                warmup_steps: 100,
                custom_checkpoint_steps: Vec::new(),
                optimizer: AdamWConfig {
                    beta2: 0.99,
                    ..AdamWConfig::default()
                },
                ..TrainConfig::default()
            },
            retention_threshold: 0.9,
            max_rounds: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeSettings {
    pub size: Option<usize>,
    pub dedup_threshold: f64,
    pub max_doc_tokens: usize,
}

impl Default for ForgeSettings {
    fn default() -> Self {
        let d = ForgeOptions::default();
        ForgeSettings {
            size: d.size,
            dedup_threshold: d.dedup_threshold,
            max_doc_tokens: d.max_doc_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    /// `all` or a comma-separated list of format names.
    pub formats: String,
    pub max_new_tokens: usize,
    pub jobs: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            formats: "all".into(),
            max_new_tokens: crate::probe::DEFAULT_MAX_NEW_TOKENS,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Paths are resolved against the directory of the experiment file.
    pub facts: PathBuf,
    pub heldout_facts: Option<PathBuf>,
    pub templates: PathBuf,
    pub model_scale: String,
    pub model: ModelConfig,
    pub base: BaseSettings,
    /// Template for every continual pre-training run; ratio and learning
    /// rate are filled in per run.
    pub cpt: TrainConfig,
    pub poison_ratios: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// Extra learning rates run only at `lr_sweep_ratio`.
    pub lr_sweep: Vec<f64>,
    pub lr_sweep_ratio: f64,
    pub forge: ForgeSettings,
    pub probe: ProbeSettings,
    /// Persist every scheduled checkpoint of every run.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            facts: "facts.jsonl".into(),
            heldout_facts: Some("heldout_facts.jsonl".into()),
            templates: "templates.json".into(),
            model_scale: "4L-128d".into(),
            model: ModelConfig::default(),
            base: BaseSettings::default(),
            cpt: TrainConfig {
                batch_size: 1,
                seq_len: 128,
                warmup_steps: 50,
                epochs: 4,
                ..TrainConfig::default()
            },
            poison_ratios: vec![0.1, 0.5, 0.9, 1.0],
            learning_rates: vec![5e-4, 1e-4, 5e-6],
            lr_sweep: Vec::new(),
            lr_sweep_ratio: 1.0,
            forge: ForgeSettings::default(),
            probe: ProbeSettings::default(),
            save_checkpoints: true,
        }
    }
}

/// One continual pre-training run of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub poison_ratio: f64,
    pub learning_rate: f64,
}

impl RunSpec {
    pub fn name(&self) -> String {
        format!(
            "ratio-{}_lr-{}",
            fmt_sig(self.poison_ratio),
            fmt_sig(self.learning_rate)
        )
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Loads a TOML experiment file and resolves its data paths.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(root);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.facts);
        fix(&mut self.templates);
        if let Some(h) = &mut self.heldout_facts {
            fix(h);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    pub fn formats(&self) -> Result<Vec<PromptFormat>, ExperimentError> {
        crate::probe::parse_format_list(&self.probe.formats).map_err(ExperimentError::Config)
    }

    /// Main grid (every ratio at every learning rate) followed by the extra
    /// learning rates at the sweep ratio, without duplicates.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &r in &self.poison_ratios {
                out.push(RunSpec {
                    poison_ratio: r,
                    learning_rate: lr,
                });
            }
        }
        for &lr in &self.lr_sweep {
            out.push(RunSpec {
                poison_ratio: self.lr_sweep_ratio,
                learning_rate: lr,
            });
        }
        let mut seen = Vec::new();
        out.retain(|s| {
            let key = (s.poison_ratio.to_bits(), s.learning_rate.to_bits());
            let fresh = !seen.contains(&key);
            seen.push(key);
            fresh
        });
        out
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        self.model.validate()?;
        if self.runs().is_empty() {
            return bad("no runs: poison_ratios and learning_rates (or lr_sweep) must be non-empty");
        }
        let ratios = self.poison_ratios.iter().chain(std::iter::once(&self.lr_sweep_ratio));
        if ratios.into_iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("poison ratios must lie in [0, 1]");
        }
        if self
            .learning_rates
            .iter()
            .chain(&self.lr_sweep)
            .any(|lr| !(*lr > 0.0 && lr.is_finite()))
        {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.base.retention_threshold) || self.base.max_rounds == 0 {
            return bad("base.retention_threshold must lie in [0, 1] and base.max_rounds be positive");
        }
        self.base.train.validate()?;
        self.cpt.validate()?;
        self.formats()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseOutcome {
    pub params: TransformerParams<f32>,
    pub rounds: usize,
    /// Fraction of probe facts with a positive direct-question margin.
    pub retention: f64,
    pub heldout_retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub info: RunInfo,
    pub corpus: CorpusManifest,
    pub plan: RunPlan,
    /// Base model (step 0) plus every scheduled checkpoint.
    pub records: Vec<ProbeRecord>,
    pub heldout_retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub base: BaseOutcome,
    pub runs: Vec<RunOutcome>,
    pub summary: ExperimentSummary,
    pub files: Vec<PathBuf>,
}

impl ExperimentOutcome {
    pub fn run(&self, poison_ratio: f64, learning_rate: f64) -> Option<&RunOutcome> {
        self.runs
            .iter()
            .find(|r| r.spec.poison_ratio == poison_ratio && r.spec.learning_rate == learning_rate)
    }
}

/// Facts, templates and formats an experiment file refers to.
#[derive(Debug, Clone)]
pub struct ExperimentInputs {
    pub facts: Vec<FactItem>,
    pub heldout: Vec<FactItem>,
    pub templates: Vec<StyleTemplate>,
    pub formats: Vec<PromptFormat>,
}

impl ExperimentInputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let heldout = match &cfg.heldout_facts {
            Some(p) => load_facts(p)?,
            None => Vec::new(),
        };
        Ok(ExperimentInputs {
            facts: load_facts(&cfg.facts)?,
            heldout,
            templates: load_templates(&cfg.templates)?,
            formats: cfg.formats()?,
        })
    }
}

impl ExperimentConfig {
    pub fn probe_options(&self) -> ProbeOptions {
        ProbeOptions {
            max_new_tokens: self.probe.max_new_tokens,
            jobs: self.probe.jobs,
        }
    }
}

fn direct_margin_rate(params: &TransformerParams<f32>, facts: &[FactItem]) -> Result<f64, ExperimentError> {
    Ok(evaluate_retention(params, facts)?)
}

/// Trains a fresh model on the factual documents of every probe and held-out
/// fact, in rounds, until enough probe facts prefer their correct answer.
pub fn train_base(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<BaseOutcome, ExperimentError> {
    cfg.validate()?;
    let inputs = ExperimentInputs::load(cfg)?;
    train_base_with(cfg, &inputs, out_dir)
}

pub fn train_base_with(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    out_dir: Option<&Path>,
) -> Result<BaseOutcome, ExperimentError> {
    let mut all = inputs.facts.clone();
    all.extend(inputs.heldout.iter().cloned());
    let corpus = build_corpus(
        &all,
        &inputs.templates,
        &ForgeOptions {
            poison_ratio: 0.0,
            size: None,
            seed: cfg.seed,
            dedup_threshold: cfg.forge.dedup_threshold,
            max_doc_tokens: cfg.forge.max_doc_tokens,
        },
    )?;
    let mut params = TransformerParams::init(cfg.model, cfg.seed)?;
    let mut log = Vec::new();
    let mut retention = 0.0;
    let mut rounds = 0;
    while rounds < cfg.base.max_rounds {
        let tc = TrainConfig {
            seed: cfg.seed.wrapping_add(rounds as u64),
            poison_ratio: 0.0,
            ..cfg.base.train.clone()
        };
        let t = Instant::now();
        let out = train(params, &corpus.docs, &tc, None, &mut |_| Ok(()))?;
        params = out.params;
        let offset = log.len() as u64;
        log.extend(out.log.into_iter().map(|mut l| {
            l.step += offset;
            l
        }));
        rounds += 1;
        retention = direct_margin_rate(&params, &inputs.facts)?;
        info!(
            "base round {rounds}: {} steps in {:.1}s, {:.3} of facts prefer the correct answer",
            out.plan.max_steps,
            t.elapsed().as_secs_f64(),
            retention
        );
        if retention >= cfg.base.retention_threshold {
            break;
        }
    }
    if retention < cfg.base.retention_threshold {
        return Err(ExperimentError::BaseNotConverged {
            rounds,
            retention,
            threshold: cfg.base.retention_threshold,
        });
    }
    let heldout_retention = if inputs.heldout.is_empty() {
        None
    } else {
        Some(evaluate_retention(&params, &inputs.heldout)?)
    };
    if let Some(dir) = out_dir {
        let dir = dir.join(BASE_DIR);
        params.save(&dir, "model")?;
        write_corpus(&dir.join("corpus"), &corpus)?;
        write_train_log(&dir.join(TRAIN_LOG), &log)?;
    }
    Ok(BaseOutcome {
        params,
        rounds,
        retention,
        heldout_retention,
    })
}

/// Probes the base model as step 0 of every run.
pub fn probe_base(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    base: &TransformerParams<f32>,
) -> Result<Vec<ProbeRecord>, ExperimentError> {
    Ok(probe_checkpoint(
        base,
        0,
        &inputs.facts,
        &inputs.formats,
        cfg.probe_options(),
    )?)
}

/// Forges the run's corpus, continues training the base model on it and
/// probes every scheduled checkpoint.
pub fn cpt_run(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    base: &TransformerParams<f32>,
    base_records: &[ProbeRecord],
    spec: RunSpec,
    out_dir: Option<&Path>,
) -> Result<RunOutcome, ExperimentError> {
    let name = spec.name();
    let t = Instant::now();
    let corpus = build_corpus(
        &inputs.facts,
        &inputs.templates,
        &ForgeOptions {
            poison_ratio: spec.poison_ratio,
            size: cfg.forge.size,
            seed: cfg.seed,
            dedup_threshold: cfg.forge.dedup_threshold,
            max_doc_tokens: cfg.forge.max_doc_tokens,
        },
    )?;
    let tc = TrainConfig {
        learning_rate: spec.learning_rate,
        poison_ratio: spec.poison_ratio,
        seed: cfg.seed,
        ..cfg.cpt.clone()
    };
    let run_dir = out_dir.map(|d| d.join(RUNS_DIR).join(&name));
    let train_dir = run_dir.as_ref().map(|d| d.join("train"));
    let opts = cfg.probe_options();
    let mut records = base_records.to_vec();
    let mut probe_err = None;
    let outcome = train(
        base.clone(),
        &corpus.docs,
        &tc,
        train_dir.as_deref().filter(|_| cfg.save_checkpoints),
        &mut |ckpt| match probe_checkpoint(&ckpt.params, ckpt.step, &inputs.facts, &inputs.formats, opts) {
            Ok(r) => {
                records.extend(r);
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                probe_err = Some(e);
                Err(TrainError::Callback(msg))
            }
        },
    );
    if let Some(e) = probe_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    let heldout_retention = if inputs.heldout.is_empty() {
        None
    } else {
        Some(evaluate_retention(&outcome.params, &inputs.heldout)?)
    };
    let info = RunInfo {
        name: name.clone(),
        poison_ratio: spec.poison_ratio,
        model_scale: cfg.model_scale.clone(),
        learning_rate: spec.learning_rate,
        n_layers: cfg.model.n_layers,
    };
    if let Some(dir) = &run_dir {
        write_corpus(&dir.join("corpus"), &corpus)?;
        let td = dir.join("train");
        fs::create_dir_all(&td).map_err(|e| ExperimentError::io(&td, e))?;
        write_train_log(&td.join(TRAIN_LOG), &outcome.log)?;
        let pd = dir.join("probe");
        write_probe_outputs(&pd, &records)?;
        let p = pd.join(RUN_INFO_FILE);
        let json = serde_json::to_string_pretty(&info).expect("run info serialises");
        fs::write(&p, json + "\n").map_err(|e| ExperimentError::io(&p, e))?;
    }
    info!(
        "run {name}: {} docs, {} steps, {} checkpoints in {:.1}s",
        corpus.docs.len(),
        outcome.plan.max_steps,
        outcome.checkpoint_steps.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(RunOutcome {
        spec,
        info,
        corpus: corpus.manifest,
        plan: outcome.plan,
        records,
        heldout_retention,
    })
}

/// Runs the sweep from an already trained base model.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    base: BaseOutcome,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let inputs = ExperimentInputs::load(cfg)?;
    sweep_with(cfg, &inputs, base, out_dir)
}

fn sweep_with(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    base: BaseOutcome,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let base_records = probe_base(cfg, inputs, &base.params)?;
    let mut runs = Vec::new();
    for spec in cfg.runs() {
        runs.push(cpt_run(cfg, inputs, &base.params, &base_records, spec, out_dir)?);
    }
    finish(base, runs, out_dir)
}

/// Summarises the runs and, given an output directory, writes the report set
/// under `report/`.
pub fn finish(
    base: BaseOutcome,
    runs: Vec<RunOutcome>,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let run_records: Vec<RunRecords> = runs
        .iter()
        .map(|r| RunRecords {
            info: r.info.clone(),
            records: r.records.clone(),
        })
        .collect();
    let summary = summarize(&run_records)?;
    let files = match out_dir {
        Some(d) => emit_reports(&summary, &d.join(REPORT_DIR))?,
        None => Vec::new(),
    };
    Ok(ExperimentOutcome {
        base,
        runs,
        summary,
        files,
    })
}

/// Base training, the full sweep and the report set.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let inputs = ExperimentInputs::load(cfg)?;
    let base = train_base_with(cfg, &inputs, out_dir)?;
    sweep_with(cfg, &inputs, base, out_dir)
}

/// Reads every `runs/*/probe` directory under an experiment output.
pub fn load_run_records(experiment_dir: &Path) -> Result<Vec<RunRecords>, ExperimentError> {
    let runs = experiment_dir.join(RUNS_DIR);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(|e| ExperimentError::io(&runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join("probe")))
        .filter(|p| p.join(RUN_INFO_FILE).exists())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_probe_dir(d)).collect()
}

/// A probe directory holding `records.jsonl` and `run.json`.
pub fn load_probe_dir(dir: &Path) -> Result<RunRecords, ExperimentError> {
    let p = dir.join(RUN_INFO_FILE);
    let text = fs::read_to_string(&p).map_err(|e| ExperimentError::io(&p, e))?;
    let info: RunInfo =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?;
    let records = crate::probe::read_records(&dir.join(crate::probe::RECORDS_FILE))?;
    Ok(RunRecords { info, records })
}
