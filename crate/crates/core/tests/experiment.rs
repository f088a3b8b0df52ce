use std::path::{Path, PathBuf};

use belief_lab::corpus::{load_facts, write_facts};
use belief_lab::experiment::{
    load_run_records, run_experiment, train_base, ExperimentConfig, ExperimentError, RunSpec, BASE_DIR, REPORT_DIR,
    RUNS_DIR,
};
use belief_lab::nn::ModelConfig;
use belief_lab::probe::PromptFormat;
use belief_lab::report::{FLIP_COMPARISON_CSV, FLIP_RATE_CSV};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn tiny(dir: &Path, n_facts: usize) -> ExperimentConfig {
    let facts: Vec<_> = load_facts(&data("facts.jsonl"))
        .unwrap()
        .into_iter()
        .take(n_facts)
        .collect();
    let path = dir.join("facts.jsonl");
    write_facts(&path, &facts).unwrap();
    let mut cfg = ExperimentConfig {
        facts: path,
        heldout_facts: Some(data("heldout_facts.jsonl")),
        templates: data("templates.json"),
        model_scale: "2L-16d".into(),
        model: ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 260,
            max_seq_len: 256,
        },
        poison_ratios: vec![0.5, 1.0],
        learning_rates: vec![1e-3],
        lr_sweep: vec![1e-3, 2e-3],
        ..ExperimentConfig::default()
    };
    cfg.base.retention_threshold = 0.0;
    cfg.base.max_rounds = 1;
    cfg.base.train.epochs = 1;
    cfg.base.train.warmup_steps = 2;
    cfg.cpt.epochs = 1;
    cfg.cpt.seq_len = 64;
    cfg.cpt.warmup_steps = 2;
    cfg.cpt.custom_checkpoint_steps = vec![1];
    cfg.probe.formats = "direct_question,yes_no,structured_json".into();
    cfg.probe.max_new_tokens = 6;
    cfg
}

#[test]
fn shipped_experiment_file_parses_and_round_trips() {
    let cfg = ExperimentConfig::load(&data("experiment.toml")).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.runs().len(), 12);
    assert!(cfg.facts.exists() && cfg.templates.exists());
    assert_eq!(cfg.formats().unwrap(), PromptFormat::ALL.to_vec());
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml("unknown_key = 1").is_err());
}

#[test]
fn runs_cover_the_grid_then_the_extra_rates_without_duplicates() {
    let cfg = ExperimentConfig {
        poison_ratios: vec![0.1, 1.0],
        learning_rates: vec![1e-4],
        lr_sweep: vec![5e-4, 1e-4, 5e-6],
        lr_sweep_ratio: 1.0,
        ..ExperimentConfig::default()
    };
    let runs: Vec<(f64, f64)> = cfg.runs().iter().map(|r| (r.poison_ratio, r.learning_rate)).collect();
    assert_eq!(runs, vec![(0.1, 1e-4), (1.0, 1e-4), (1.0, 5e-4), (1.0, 5e-6)]);
    let name = RunSpec {
        poison_ratio: 0.5,
        learning_rate: 1e-4,
    }
    .name();
    assert_eq!(name, "ratio-0.5_lr-0.0001");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_ratio = ExperimentConfig {
        poison_ratios: vec![1.5],
        ..ExperimentConfig::default()
    };
    assert!(matches!(bad_ratio.validate(), Err(ExperimentError::Config(_))));
    let no_runs = ExperimentConfig {
        learning_rates: vec![],
        ..ExperimentConfig::default()
    };
    assert!(matches!(no_runs.validate(), Err(ExperimentError::Config(_))));
    let mut bad_format = ExperimentConfig::default();
    bad_format.probe.formats = "haiku".into();
    assert!(bad_format.validate().is_err());
}

#[test]
fn end_to_end_sweep_writes_and_reloads_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 4);
    let out = dir.path().join("out");
    let outcome = run_experiment(&cfg, Some(&out)).unwrap();
    assert_eq!(outcome.runs.len(), 3);
    assert!(outcome.base.heldout_retention.is_some());
    assert!(out.join(BASE_DIR).join("model.json").exists());
    for run in &outcome.runs {
        let steps: Vec<u64> = run.records.iter().map(|r| r.step).collect();
        assert_eq!(steps[0], 0, "base model is probed as step 0");
        assert_eq!(*steps.last().unwrap(), run.plan.max_steps);
        assert_eq!(run.records.len() % (4 * 3), 0);
        assert!(out
            .join(RUNS_DIR)
            .join(run.spec.name())
            .join("train")
            .join("train_log.csv")
            .exists());
    }
    let reloaded = load_run_records(&out).unwrap();
    assert_eq!(reloaded.len(), 3);
    for r in &reloaded {
        let mine = outcome.run(r.info.poison_ratio, r.info.learning_rate).unwrap();
        assert_eq!(r.records, mine.records);
        assert_eq!(r.info, mine.info);
    }
    for f in [FLIP_RATE_CSV, FLIP_COMPARISON_CSV] {
        assert!(out.join(REPORT_DIR).join(f).exists());
    }
    let no_disk = run_experiment(&cfg, None).unwrap();
    assert_eq!(no_disk.summary, outcome.summary);
    assert!(no_disk.files.is_empty());
}

#[test]
fn unreachable_retention_threshold_fails_base_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), 30);
    cfg.base.retention_threshold = 1.0;
    cfg.base.train.learning_rate = 1e-7;
    cfg.base.max_rounds = 2;
    match train_base(&cfg, None) {
        Err(ExperimentError::BaseNotConverged { rounds, threshold, .. }) => {
            assert_eq!(rounds, 2);
            assert_eq!(threshold, 1.0);
        }
        other => panic!("expected BaseNotConverged, got {:?}", other.map(|b| b.retention)),
    }
}
