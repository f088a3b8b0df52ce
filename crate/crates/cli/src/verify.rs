//! Self-contained oracle suite behind the `verify` subcommand.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use belief_lab::corpus::{
    build_corpus, deduplicate, estimate_jaccard, minhash_signature, parse_facts, parse_templates, write_corpus,
    ForgeOptions, Stance, Style, StyledDocument,
};
use belief_lab::nn::{
    backward, forward, forward_with_lens_states, lens_logits, next_token_loss, ModelConfig, TokenSequence,
    TransformerParams,
};
use belief_lab::probe::{
    probe_checkpoint, prompt_tokens, sequence_log_likelihood, write_probe_outputs, BeliefScore, ProbeOptions,
    PromptFormat,
};
use belief_lab::report::{
    classify_pattern, divergence_layer_of, emit_reports, summarize, Pattern, RunInfo, RunRecords,
};
use belief_lab::train::{
    checkpoint_schedule, load_checkpoint, save_checkpoint, tokens_per_step, train, LrSchedule, TrainConfig, Trainer,
};
use log::{error, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::recorded;
use crate::exit::OracleFailure;
use crate::VerifyArgs;

const FACTS: &str = include_str!("../../../data/facts.jsonl");
const TEMPLATES: &str = include_str!("../../../data/templates.json");

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn tiny(n_layers: usize, d_model: usize, n_heads: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_ff: 4 * d_model,
        vocab_size: 260,
        max_seq_len,
    }
}

fn randomised<T: belief_lab::nn::Scalar>(cfg: ModelConfig, seed: u64, scale: f64) -> Result<TransformerParams<T>> {
    let mut p = TransformerParams::<T>::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in &mut p.data {
        *x = T::lit(rng.random_range(-scale..scale));
    }
    Ok(p)
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: u16) -> TokenSequence {
    TokenSequence::new((0..len).map(|_| rng.random_range(0..vocab)).collect())
}

fn lens_consistency() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let cfg = tiny(rng.random_range(0..4), 8 * heads, heads, 32);
        let p = randomised::<f32>(cfg, i, 0.3)?;
        let len = rng.random_range(1..32);
        let toks = random_tokens(&mut rng, len, 260);
        let (logits, stack) = forward_with_lens_states(&p, &toks)?;
        let lens = lens_logits(&p, stack.states.last().ok_or_else(|| anyhow!("empty lens stack"))?);
        for (a, b) in lens.iter().zip(logits.last_row()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    Ok((worst < 1e-4, format!("100 models, max |lens - head| = {worst:.2e}")))
}

fn gradient_check() -> Result<(bool, String)> {
    let cfg = ModelConfig::default();
    let p = randomised::<f64>(cfg, 7, 0.05)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let toks = random_tokens(&mut rng, 12, 256);
    let grads = backward(&p, &toks)?;
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut n = 0;
    for e in p.layout.entries.iter() {
        for _ in 0..4 {
            let i = match e.name.as_str() {
                "token_embedding" => {
                    e.offset
                        + toks.ids[rng.random_range(0..toks.len())] as usize * cfg.d_model
                        + rng.random_range(0..cfg.d_model)
                }
                "positional_embedding" => e.offset + rng.random_range(0..toks.len() * cfg.d_model),
                _ => e.offset + rng.random_range(0..e.len()),
            };
            let mut q = p.clone();
            q.data[i] = p.data[i] + h;
            let up = next_token_loss(&q, &toks)?.0;
            q.data[i] = p.data[i] - h;
            let down = next_token_loss(&q, &toks)?.0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.data[i];
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7));
            n += 1;
        }
    }
    Ok((
        n >= 100 && worst < 1e-3,
        format!("{n} coordinates, worst relative error {worst:.2e}"),
    ))
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row[t] - m - z.ln()
}

fn delta_ll_oracle() -> Result<(bool, String)> {
    let p = randomised::<f64>(tiny(2, 16, 2, 64), 3, 0.3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (plen, alen) = (rng.random_range(1..20), rng.random_range(1..10));
        let prompt = random_tokens(&mut rng, plen, 256);
        let answer = random_tokens(&mut rng, alen, 256);
        let mut full = prompt.ids.clone();
        full.extend(&answer.ids);
        let logits = forward(&p, &TokenSequence::new(full))?;
        let want: f64 = (0..answer.len())
            .map(|i| log_softmax_at(logits.row(prompt.len() + i - 1), answer.ids[i] as usize))
            .sum();
        worst = worst.max((sequence_log_likelihood(&p, &prompt, &answer)? - want).abs());
    }
    let (a, b) = (-3.25, -7.5);
    let anti = BeliefScore::new(a, b).delta_ll == -BeliefScore::new(b, a).delta_ll;
    let zero = BeliefScore::new(a, a).delta_ll == 0.0;
    let prompt = prompt_tokens("Where is the capital?");
    let same = sequence_log_likelihood(&p, &prompt, &TokenSequence::new(vec![65, 66]))?;
    let zero_model = BeliefScore::new(same, same).delta_ll == 0.0;
    Ok((
        worst < 1e-6 && anti && zero && zero_model,
        format!(
            "max chain-rule diff {worst:.2e}, antisymmetric {anti}, zero case {}",
            zero && zero_model
        ),
    ))
}

fn words(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.random_range(0..vocab))).collect()
}

fn shingle_jaccard(a: &str, b: &str) -> f64 {
    let set = |s: &str| -> HashSet<Vec<String>> {
        let w: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        w.windows(3).map(|x| x.to_vec()).collect()
    };
    let (x, y) = (set(a), set(b));
    let union = x.union(&y).count();
    if union == 0 {
        return 1.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

fn doc(id: u64, text: String) -> StyledDocument {
    StyledDocument {
        doc_id: id,
        fact_id: 0,
        stance: Stance::Factual,
        style: Style::Forum,
        text,
    }
}

fn minhash_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut good = 0;
    for i in 0..50 {
        let base = words(&mut rng, 40, 300);
        let mut other = base.clone();
        for _ in 0..(i % 10) * 2 {
            let at = rng.random_range(0..other.len());
            other[at] = format!("x{}", rng.random_range(0..300));
        }
        let (a, b) = (base.join(" "), other.join(" "));
        let est = estimate_jaccard(&minhash_signature(&a, 3, 128, 77)?, &minhash_signature(&b, 3, 128, 77)?)?;
        if (est - shingle_jaccard(&a, &b)).abs() <= 0.1 {
            good += 1;
        }
    }
    let mut docs = Vec::new();
    let mut bases = Vec::new();
    for id in 0..100u64 {
        let b = words(&mut rng, 30, 5000);
        docs.push(doc(id, b.join(" ")));
        bases.push(b);
    }
    for (k, b) in bases.iter().enumerate() {
        let mut v = b.clone();
        for j in 0..(k % 8) {
            v[3 + 3 * j] = format!("z{}", rng.random_range(0..5000));
        }
        docs.push(doc(100 + k as u64, v.join(" ")));
    }
    let ours: HashSet<u64> = deduplicate(&docs, 0.8)?.removed.iter().map(|r| r.removed_id).collect();
    let mut kept: Vec<&StyledDocument> = Vec::new();
    let mut exact = HashSet::new();
    for d in &docs {
        if kept.iter().any(|k| shingle_jaccard(&k.text, &d.text) >= 0.8) {
            exact.insert(d.doc_id);
        } else {
            kept.push(d);
        }
    }
    let by_id: BTreeMap<u64, &StyledDocument> = docs.iter().map(|d| (d.doc_id, d)).collect();
    let unexplained = ours
        .symmetric_difference(&exact)
        .filter(|&&id| {
            !by_id
                .range(..id)
                .any(|(_, e)| (shingle_jaccard(&e.text, &by_id[&id].text) - 0.8).abs() <= 0.1)
        })
        .count();
    Ok((
        good >= 45 && unexplained == 0,
        format!(
            "{good}/50 pairs within 0.1; {} dedup disagreements on 200 docs, {unexplained} outside the 0.1 band",
            ours.symmetric_difference(&exact).count()
        ),
    ))
}

fn schedule_arithmetic() -> Result<(bool, String)> {
    let tps = tokens_per_step(4, 256, 1) == 1024;
    let sched = checkpoint_schedule(1000, &[100, 200, 300])? == (1..=10).map(|k| 100 * k).collect::<Vec<u64>>();
    let s = LrSchedule::new(1e-4, 200, 1000)?;
    let lr = s.lr_at(0)?.abs() <= 1e-12 && (s.lr_at(200)? - 1e-4).abs() <= 1e-12 && s.lr_at(1000)?.abs() <= 1e-12;
    Ok((
        tps && sched && lr,
        format!("tokens_per_step {tps}, checkpoint schedule {sched}, lr endpoints {lr}"),
    ))
}

fn planted_patterns() -> Result<(bool, String)> {
    let healthy = vec![1.0; 29];
    let flipped_from = |l: usize| (0..29).map(|i| if i < l { 1.0 } else { -1.0 }).collect::<Vec<f64>>();
    let p9 = classify_pattern(divergence_layer_of(&healthy, &flipped_from(9))?, 28)?;
    let p26 = classify_pattern(divergence_layer_of(&healthy, &flipped_from(26))?, 28)?;
    let ok = p9 == Pattern::MidProcessingCorruption && p26 == Pattern::LateStageErosion;
    Ok((ok, format!("layer 9 of 28 -> {p9:?}, layer 26 of 28 -> {p26:?}")))
}

/// Forge, train, probe and report into `dir`.
fn pipeline(dir: &Path) -> Result<()> {
    let facts: Vec<_> = parse_facts(FACTS)?.into_iter().take(4).collect();
    let templates = parse_templates(TEMPLATES)?;
    let corpus = build_corpus(
        &facts,
        &templates,
        &ForgeOptions {
            poison_ratio: 1.0,
            seed: 5,
            ..ForgeOptions::default()
        },
    )?;
    write_corpus(&dir.join("corpus"), &corpus)?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        seq_len: 64,
        warmup_steps: 5,
        poison_ratio: 1.0,
        seed: 5,
        custom_checkpoint_steps: vec![],
        ..TrainConfig::default()
    };
    let formats = [PromptFormat::DirectQuestion, PromptFormat::ClozeCompletion];
    let opts = ProbeOptions {
        max_new_tokens: 8,
        jobs: 1,
    };
    let mut records = Vec::new();
    train(
        TransformerParams::init(tiny(2, 16, 2, 256), 5)?,
        &corpus.docs,
        &cfg,
        Some(&dir.join("train")),
        &mut |c| {
            records.extend(probe_checkpoint(&c.params, c.step, &facts, &formats, opts)?);
            Ok(())
        },
    )?;
    write_probe_outputs(&dir.join("probe"), &records)?;
    let run = RunRecords {
        info: RunInfo {
            name: "verify".into(),
            poison_ratio: 1.0,
            model_scale: "2L-16d".into(),
            learning_rate: cfg.learning_rate,
            n_layers: 2,
        },
        records,
    };
    emit_reports(&summarize(&[run])?, &dir.join("report"))?;
    Ok(())
}

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Result<(bool, String)> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (fa, fb) = (files_under(a.path())?, files_under(b.path())?);
    let identical = fa == fb;

    let facts = parse_facts(FACTS)?;
    let corpus = build_corpus(
        &facts,
        &parse_templates(TEMPLATES)?,
        &ForgeOptions {
            poison_ratio: 0.5,
            seed: 3,
            ..ForgeOptions::default()
        },
    )?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        seq_len: 32,
        warmup_steps: 10,
        seed: 9,
        custom_checkpoint_steps: vec![],
        ..TrainConfig::default()
    };
    let mut full = Trainer::new(TransformerParams::init(tiny(1, 16, 2, 32), 9)?, &corpus.docs, cfg)?;
    if full.plan().max_steps < 60 {
        return Err(anyhow!("resume check needs at least 60 steps"));
    }
    for _ in 0..10 {
        full.step()?;
    }
    let dir = tempfile::tempdir()?;
    save_checkpoint(&full.checkpoint(), dir.path())?;
    let prior = full.log().to_vec();
    for _ in 0..50 {
        full.step()?;
    }
    let mut resumed = Trainer::resume(load_checkpoint(dir.path())?, &corpus.docs, prior)?;
    for _ in 0..50 {
        resumed.step()?;
    }
    let resume_ok = resumed.checkpoint() == full.checkpoint() && resumed.log() == full.log();
    Ok((
        identical && resume_ok,
        format!(
            "{} files byte-identical across two runs: {identical}; 50-step resume bit-exact: {resume_ok}",
            fa.len()
        ),
    ))
}

pub fn suite() -> Vec<Check> {
    vec![
        check("lens consistency", lens_consistency),
        check("gradient check (default model)", gradient_check),
        check("sequence log-likelihood oracle", delta_ll_oracle),
        check("minhash vs exact jaccard", minhash_oracle),
        check("schedule arithmetic", schedule_arithmetic),
        check("planted trajectory patterns", planted_patterns),
        check("determinism and resume", determinism),
    ]
}

pub fn run(a: &VerifyArgs) -> Result<()> {
    let body = |rec: Option<&mut crate::manifest::Recorder>| -> Result<()> {
        let mut checks = Vec::new();
        let mut go = || {
            checks = suite();
            Ok(((), Vec::new()))
        };
        match rec {
            Some(r) => r.stage("oracles", &mut go)?,
            None => go()?.0,
        }
        for c in &checks {
            if c.passed {
                info!("PASS {}: {}", c.name, c.detail);
            } else {
                error!("FAIL {}: {}", c.name, c.detail);
            }
        }
        if let Some(out) = &a.out {
            fs::create_dir_all(out)?;
            fs::write(out.join("verify.json"), serde_json::to_string_pretty(&checks)? + "\n")?;
        }
        let failed = checks.iter().filter(|c| !c.passed).count();
        if failed > 0 {
            return Err(OracleFailure(failed).into());
        }
        Ok(())
    };
    match &a.out {
        Some(out) => recorded("verify", out, |rec| body(Some(rec))),
        None => body(None),
    }
}
