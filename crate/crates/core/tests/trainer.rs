use std::fs;
use std::path::{Path, PathBuf};

use belief_lab::corpus::{build_corpus, load_facts, load_templates, ForgeOptions, StyledDocument};
use belief_lab::nn::{ModelConfig, TransformerParams};
use belief_lab::train::{
    checkpoint_dir_name, load_checkpoint, pack, read_train_log, save_checkpoint, train, TrainConfig, TrainError,
    Trainer, PARAMS_BLOB, RNG_BLOB, TRAIN_LOG,
};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: 260,
        max_seq_len: 64,
    }
}

fn corpus(size: usize) -> Vec<StyledDocument> {
    let facts = load_facts(&data("facts.jsonl")).unwrap();
    let templates = load_templates(&data("templates.json")).unwrap();
    let opts = ForgeOptions {
        poison_ratio: 0.5,
        size: Some(size),
        seed: 3,
        ..ForgeOptions::default()
    };
    build_corpus(&facts, &templates, &opts).unwrap().docs
}

fn config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        seq_len: 64,
        warmup_steps: 10,
        epochs: 1,
        seed: 17,
        custom_checkpoint_steps: vec![5, 20],
        ..TrainConfig::default()
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(read_all(&p));
        } else {
            out.push((p.display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn runs_exactly_max_steps_and_persists_every_scheduled_checkpoint() {
    let docs = corpus(60);
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    let out = train(
        TransformerParams::init(small_model(), 1).unwrap(),
        &docs,
        &cfg,
        Some(dir.path()),
        &mut |c| {
            seen.push(c.step);
            Ok(())
        },
    )
    .unwrap();
    let total: u64 = docs.iter().map(|d| d.text.len() as u64 + 1).sum();
    assert_eq!(out.plan.total_tokens, total);
    assert_eq!(out.plan.max_steps, total.div_ceil(128));
    assert_eq!(out.log.len() as u64, out.plan.max_steps);
    assert_eq!(seen, out.checkpoint_steps);
    assert_eq!(seen, out.plan.checkpoint_steps);
    assert!(seen.contains(&5) && seen.contains(&20) && seen.contains(&out.plan.max_steps));
    for s in &seen {
        assert!(dir.path().join(checkpoint_dir_name(*s)).join("manifest.json").exists());
    }
    let log = read_train_log(&dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log, out.log);
    assert_eq!(log[0].lr, 0.0);
    assert!(log.last().unwrap().loss < log[0].loss);
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let docs = corpus(40);
    let cfg = config();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        train(
            TransformerParams::init(small_model(), 2).unwrap(),
            &docs,
            &cfg,
            Some(dir.path()),
            &mut |_| Ok(()),
        )
        .unwrap();
        let files = read_all(dir.path())
            .into_iter()
            .map(|(p, b)| (p.replace(&dir.path().display().to_string(), ""), b))
            .collect::<Vec<_>>();
        files
    };
    let (a, b) = (run(), run());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn save_load_save_is_byte_identical_and_tampering_is_caught() {
    let docs = corpus(30);
    let mut t = Trainer::new(TransformerParams::init(small_model(), 3).unwrap(), &docs, config()).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let ckpt = t.checkpoint();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, d1.path()).unwrap();
    let loaded = load_checkpoint(d1.path()).unwrap();
    assert_eq!(loaded, ckpt);
    save_checkpoint(&loaded, d2.path()).unwrap();
    for f in ["manifest.json", "params.bin", "optstate.bin", "rng.bin"] {
        assert_eq!(
            fs::read(d1.path().join(f)).unwrap(),
            fs::read(d2.path().join(f)).unwrap(),
            "{f}"
        );
    }
    for blob in [PARAMS_BLOB, RNG_BLOB] {
        let path = d2.path().join(blob);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(d2.path()) {
            Err(TrainError::Checksum { blob: b, .. }) => assert_eq!(b, blob),
            other => panic!("expected checksum error, got {other:?}"),
        }
        bytes[3] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
    }
}

#[test]
fn resume_matches_uninterrupted_training_bit_exactly() {
    let docs = corpus(200);
    let cfg = TrainConfig { epochs: 2, ..config() };
    let init = TransformerParams::init(small_model(), 4).unwrap();
    let mut full = Trainer::new(init.clone(), &docs, cfg.clone()).unwrap();
    assert!(full.plan().max_steps >= 70, "need room for 50 resumed steps");
    for _ in 0..17 {
        full.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&full.checkpoint(), dir.path()).unwrap();
    let prior = full.log().to_vec();
    for _ in 0..50 {
        full.step().unwrap();
    }

    let mut resumed = Trainer::resume(load_checkpoint(dir.path()).unwrap(), &docs, prior).unwrap();
    for _ in 0..50 {
        resumed.step().unwrap();
    }
    assert_eq!(resumed.step_count(), 67);
    assert_eq!(resumed.log(), full.log());
    let (a, b) = (full.checkpoint(), resumed.checkpoint());
    assert_eq!(a.params.to_blob(), b.params.to_blob());
    assert_eq!(a, b);
}

#[test]
fn one_epoch_of_packing_conserves_corpus_tokens() {
    let docs = corpus(50);
    let toks: Vec<Vec<u16>> = docs.iter().map(|d| d.text.bytes().map(u16::from).collect()).collect();
    let order: Vec<usize> = (0..toks.len()).rev().collect();
    let chunks = pack(&toks, &order, 256);
    let non_pad = chunks
        .iter()
        .flatten()
        .filter(|&&t| t != belief_lab::nn::tokenizer::PAD)
        .count();
    assert_eq!(
        non_pad as u64,
        docs.iter().map(|d| d.text.len() as u64 + 1).sum::<u64>()
    );
}

#[test]
fn tiny_corpus_with_defaults_is_one_step() {
    // 1024 corpus tokens with default batch 4 x 256 gives exactly one update
    let text: String = "x".repeat(1023);
    let docs = vec![StyledDocument {
        doc_id: 0,
        fact_id: 0,
        stance: belief_lab::corpus::Stance::Factual,
        style: belief_lab::corpus::Style::Wiki,
        text,
    }];
    let cfg = ModelConfig {
        max_seq_len: 256,
        ..small_model()
    };
    let out = train(
        TransformerParams::init(cfg, 0).unwrap(),
        &docs,
        &TrainConfig::default(),
        None,
        &mut |_| Ok(()),
    )
    .unwrap();
    assert_eq!(out.plan.max_steps, 1);
    assert_eq!(out.plan.warmup_steps, 0);
    assert_eq!(out.checkpoint_steps, vec![1]);
}
