use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use belief_lab::corpus::{
    build_corpus, load_facts, load_templates, read_corpus, read_manifest, write_corpus, ForgeOptions, CORPUS_FILE,
    MANIFEST_FILE,
};
use belief_lab::experiment::{
    cpt_run, finish, load_probe_dir, load_run_records, probe_base, train_base_with, ExperimentConfig, ExperimentInputs,
    BASE_DIR, RUNS_DIR, RUN_INFO_FILE,
};
use belief_lab::nn::{ModelConfig, TransformerParams};
use belief_lab::probe::{parse_format_list, probe_checkpoint, write_probe_outputs, ProbeOptions, RECORDS_FILE};
use belief_lab::report::{emit_reports, summarize, RunInfo, RunRecords};
use belief_lab::train::{
    checkpoint_dir_name, load_checkpoint, read_train_log, Checkpoint, TrainConfig, Trainer, MANIFEST, TRAIN_LOG,
};
use log::info;
use serde::{Deserialize, Serialize};

use crate::exit::input;
use crate::manifest::Recorder;
use crate::{AllArgs, ForgeArgs, ProbeArgs, ReportArgs, TrainArgs};

/// Runs `body` under a manifest recorder and always writes the manifest.
pub fn recorded(command: &str, out: &Path, body: impl FnOnce(&mut Recorder) -> Result<()>) -> Result<()> {
    let mut rec = Recorder::new(command, out);
    let result = body(&mut rec);
    match rec.finish(&result) {
        Ok(path) => info!("manifest written to {}", path.display()),
        Err(e) if result.is_ok() => return Err(e),
        Err(e) => log::error!("could not write manifest: {e:#}"),
    }
    result
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(input(format!("{what} {} does not exist", path.display())))
    }
}

pub fn forge(a: &ForgeArgs) -> Result<()> {
    recorded("forge", &a.out, |rec| {
        require(&a.facts, "facts file")?;
        require(&a.templates, "templates file")?;
        if !(0.0..=1.0).contains(&a.poison_ratio) {
            return Err(input(format!("--poison-ratio {} outside [0, 1]", a.poison_ratio)));
        }
        let defaults = ForgeOptions::default();
        let opts = ForgeOptions {
            poison_ratio: a.poison_ratio,
            size: a.size,
            seed: a.seed,
            dedup_threshold: a.dedup_threshold.unwrap_or(defaults.dedup_threshold),
            max_doc_tokens: a.max_doc_tokens.unwrap_or(defaults.max_doc_tokens),
        };
        rec.effective_config(
            &serde_json::json!({ "facts": a.facts, "templates": a.templates, "forge": opts }),
            Some(a.seed),
        );
        rec.stage("forge", || {
            let facts = load_facts(&a.facts)?;
            let templates = load_templates(&a.templates)?;
            let corpus = build_corpus(&facts, &templates, &opts)?;
            write_corpus(&a.out, &corpus)?;
            let m = &corpus.manifest;
            info!(
                "{} documents ({} poisoned, {} clean), {} tokens",
                m.total_documents, m.n_poison, m.n_clean, m.total_tokens
            );
            Ok(((), vec![a.out.join(CORPUS_FILE), a.out.join(MANIFEST_FILE)]))
        })
    })
}

/// Training configuration file: `[model]` for fresh initialisation and
/// `[train]` for the run itself.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Loads model weights from a checkpoint directory or a saved `model.*` pair.
pub fn load_model(path: &Path) -> Result<TransformerParams<f32>> {
    if path.join(MANIFEST).exists() {
        return Ok(load_checkpoint(path)?.params);
    }
    if path.join("model.json").exists() {
        return Ok(TransformerParams::load(path, "model")?);
    }
    Err(input(format!(
        "{} holds neither a checkpoint ({MANIFEST}) nor a saved model (model.json)",
        path.display()
    )))
}

/// `checkpoint-<step>` subdirectories sorted by step.
pub fn checkpoint_dirs(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint-"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if path.join(MANIFEST).exists() {
                out.push((step, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn train_outputs(out: &Path, steps: &[u64]) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = steps.iter().map(|s| out.join(checkpoint_dir_name(*s))).collect();
    v.push(out.join(TRAIN_LOG));
    v
}

pub fn train(a: &TrainArgs) -> Result<()> {
    recorded("train", &a.out, |rec| {
        require(&a.corpus, "corpus")?;
        let mut file = match &a.config {
            Some(p) => {
                require(p, "config file")?;
                rec.config_file(p)?;
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<TrainFile>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainFile::default(),
        };
        let t = &mut file.train;
        t.seed = a.seed;
        if let Some(v) = a.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = a.epochs {
            t.epochs = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = a.seq_len {
            t.seq_len = v;
        }
        if let Some(v) = a.warmup_steps {
            t.warmup_steps = v;
        }
        let corpus_dir = if a.corpus.is_dir() {
            a.corpus.clone()
        } else {
            a.corpus.parent().unwrap_or(Path::new(".")).to_path_buf()
        };
        if let Ok(m) = read_manifest(&corpus_dir) {
            t.poison_ratio = m.poison_ratio;
        }
        file.train.validate()?;
        let params = match &a.base_checkpoint {
            Some(b) => {
                require(b, "base checkpoint")?;
                rec.note(format!("initialised from base checkpoint {}", b.display()));
                let p = load_model(b)?;
                file.model = p.config;
                p
            }
            None => {
                rec.note("no base checkpoint: fresh initialisation");
                TransformerParams::init(file.model, a.seed)?
            }
        };
        rec.effective_config(
            &serde_json::json!({ "corpus": a.corpus, "base_checkpoint": a.base_checkpoint, "config": file }),
            Some(a.seed),
        );
        let docs = rec.stage("load corpus", || Ok((read_corpus(&a.corpus)?, Vec::new())))?;
        rec.stage("train", || {
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let mut trainer = match a.resume.then(|| latest_checkpoint(&a.out)).transpose()?.flatten() {
                Some(ckpt) => {
                    if ckpt.train_config != file.train {
                        return Err(input(
                            "--resume: the effective training config differs from the interrupted run",
                        ));
                    }
                    let log_path = a.out.join(TRAIN_LOG);
                    let prior = if log_path.exists() {
                        read_train_log(&log_path)?
                    } else {
                        Vec::new()
                    };
                    info!("resuming from step {}", ckpt.step);
                    Trainer::resume(ckpt, &docs, prior)?
                }
                None => Trainer::new(params, &docs, file.train.clone())?,
            };
            let plan = trainer.plan().clone();
            info!(
                "{} tokens, {} tokens per step, {} steps, checkpoints at {:?}",
                plan.total_tokens, plan.tokens_per_step, plan.max_steps, plan.checkpoint_steps
            );
            trainer.run(Some(&a.out), &mut |_| Ok(()))?;
            Ok(((), train_outputs(&a.out, &plan.checkpoint_steps)))
        })
    })
}

fn latest_checkpoint(dir: &Path) -> Result<Option<Checkpoint>> {
    match checkpoint_dirs(dir)?.last() {
        Some((_, p)) => Ok(Some(load_checkpoint(p)?)),
        None => Ok(None),
    }
}

fn model_scale(c: &ModelConfig) -> String {
    format!("{}L-{}d", c.n_layers, c.d_model)
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    recorded("probe", &a.out, |rec| {
        require(&a.checkpoint_dir, "checkpoint directory")?;
        require(&a.facts, "facts file")?;
        let formats = parse_format_list(&a.formats).map_err(input)?;
        rec.effective_config(
            &serde_json::json!({
                "checkpoint_dir": a.checkpoint_dir, "facts": a.facts, "formats": a.formats,
                "baseline": a.baseline, "max_new_tokens": a.max_new_tokens, "jobs": a.jobs,
            }),
            None,
        );
        let facts = load_facts(&a.facts)?;
        let opts = ProbeOptions {
            max_new_tokens: a.max_new_tokens,
            jobs: a.jobs,
        };
        let single = a.checkpoint_dir.join(MANIFEST).exists() || a.checkpoint_dir.join("model.json").exists();
        let dirs = if single {
            vec![(None, a.checkpoint_dir.clone())]
        } else {
            checkpoint_dirs(&a.checkpoint_dir)?
                .into_iter()
                .map(|(s, p)| (Some(s), p))
                .collect()
        };
        if dirs.is_empty() {
            return Err(input(format!("no checkpoints under {}", a.checkpoint_dir.display())));
        }
        let mut records = Vec::new();
        let mut info: Option<RunInfo> = None;
        if let Some(b) = &a.baseline {
            require(b, "baseline model")?;
            let params = load_model(b)?;
            records.extend(rec.stage("probe baseline", || {
                Ok((probe_checkpoint(&params, 0, &facts, &formats, opts)?, Vec::new()))
            })?);
        }
        for (step, dir) in dirs {
            let (params, step, train_cfg) = if dir.join(MANIFEST).exists() {
                let c = load_checkpoint(&dir)?;
                (c.params, c.step, Some(c.train_config))
            } else {
                (load_model(&dir)?, step.unwrap_or(0), None)
            };
            if info.is_none() {
                let name = a
                    .checkpoint_dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("run")
                    .to_string();
                info = Some(RunInfo {
                    name: a.name.clone().unwrap_or(name),
                    poison_ratio: a
                        .poison_ratio
                        .or(train_cfg.as_ref().map(|t| t.poison_ratio))
                        .unwrap_or(0.0),
                    model_scale: model_scale(&params.config),
                    learning_rate: a
                        .learning_rate
                        .or(train_cfg.as_ref().map(|t| t.learning_rate))
                        .unwrap_or(0.0),
                    n_layers: params.config.n_layers,
                });
            }
            records.extend(rec.stage(&format!("probe step {step}"), || {
                Ok((probe_checkpoint(&params, step, &facts, &formats, opts)?, Vec::new()))
            })?);
        }
        records.sort_by_key(|r| (r.step, r.fact_id, r.format));
        let info = info.expect("at least one checkpoint probed");
        rec.stage("write", || {
            let mut files = write_probe_outputs(&a.out, &records)?;
            let p = a.out.join(RUN_INFO_FILE);
            fs::write(&p, serde_json::to_string_pretty(&info)? + "\n")
                .with_context(|| format!("writing {}", p.display()))?;
            files.push(p);
            info!("{} records written to {}", records.len(), a.out.display());
            Ok(((), files))
        })
    })
}

fn gather_records(path: &Path) -> Result<Vec<RunRecords>> {
    require(path, "records path")?;
    if path.is_file() {
        let dir = path.parent().unwrap_or(Path::new("."));
        if path.file_name().and_then(|n| n.to_str()) != Some(RECORDS_FILE) {
            return Err(input(format!("{} is not a {RECORDS_FILE} file", path.display())));
        }
        return Ok(vec![load_probe_dir(dir)?]);
    }
    if path.join(RECORDS_FILE).exists() {
        return Ok(vec![load_probe_dir(path)?]);
    }
    if path.join(RUNS_DIR).is_dir() {
        return Ok(load_run_records(path)?);
    }
    Err(input(format!(
        "{} holds neither {RECORDS_FILE} nor an experiment {RUNS_DIR}/ directory",
        path.display()
    )))
}

pub fn report(a: &ReportArgs) -> Result<()> {
    recorded("report", &a.out, |rec| {
        rec.effective_config(&serde_json::json!({ "records": a.records }), None);
        let mut runs = Vec::new();
        for r in &a.records {
            runs.extend(gather_records(r)?);
        }
        if runs.is_empty() {
            return Err(input("no probe records found"));
        }
        rec.stage("report", || {
            let summary = summarize(&runs)?;
            let files = emit_reports(&summary, &a.out)?;
            info!("{} report files written to {}", files.len(), a.out.display());
            Ok(((), files))
        })
    })
}

pub fn all(a: &AllArgs) -> Result<()> {
    recorded("all", &a.out, |rec| {
        require(&a.experiment, "experiment file")?;
        rec.config_file(&a.experiment)?;
        let mut cfg = ExperimentConfig::load(&a.experiment)?;
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(j) = a.jobs {
            cfg.probe.jobs = j;
        }
        cfg.validate()?;
        rec.effective_config(&cfg, Some(cfg.seed));
        let inputs = rec.stage("inputs", || Ok((ExperimentInputs::load(&cfg)?, Vec::new())))?;
        let base = rec.stage("base", || {
            let b = train_base_with(&cfg, &inputs, Some(&a.out))?;
            info!(
                "base model: {} rounds, {:.3} of facts prefer the correct answer",
                b.rounds, b.retention
            );
            Ok((b, vec![a.out.join(BASE_DIR)]))
        })?;
        let base_records = rec.stage("probe base", || {
            Ok((probe_base(&cfg, &inputs, &base.params)?, Vec::new()))
        })?;
        let mut runs = Vec::new();
        for spec in cfg.runs() {
            let name = spec.name();
            runs.push(rec.stage(&format!("run {name}"), || {
                let r = cpt_run(&cfg, &inputs, &base.params, &base_records, spec, Some(&a.out))?;
                Ok((r, vec![a.out.join(RUNS_DIR).join(&name)]))
            })?);
        }
        rec.stage("report", || {
            let outcome = finish(base, runs, Some(&a.out))?;
            for r in &outcome.summary.runs {
                if let Some(last) = r.checkpoints.last() {
                    info!(
                        "{}: final flip rate {:.3}, ambiguity rate {:.3}",
                        r.info.name, last.flip_rate, last.ambiguity_rate
                    );
                }
            }
            Ok(((), outcome.files))
        })
    })
}
