//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Run it with `cargo test --release --test acceptance`; the compute budgets
//! assume a release build. The desk-scale poisoning experiment behind criteria
//! 6 to 8 takes about half an hour on one core. Its output is cached under the cargo target
//! tmp directory, keyed by the effective experiment config; set
//! `ACCEPTANCE_FRESH=1` to force a rerun or `ACCEPTANCE_DIR` to move it.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use belief_lab::corpus::{
    deduplicate, estimate_jaccard, load_facts, minhash_signature, write_facts, Stance, Style, StyledDocument,
};
use belief_lab::experiment::{
    cpt_run, finish, load_run_records, probe_base, run_experiment, train_base_with, ExperimentConfig, ExperimentInputs,
    REPORT_DIR,
};
use belief_lab::nn::{
    backward, forward_with_lens_states, lens_logits, next_token_loss, ModelConfig, TokenSequence, TransformerParams,
};
use belief_lab::probe::{
    first_divergent_tokens, prompt_tokens, sequence_log_likelihood, BeliefScore, GenerationLabel, ProbeRecord,
    PromptFormat, TRAJECTORY_FORMAT,
};
use belief_lab::report::{
    classify_pattern, divergence_layer_of, Pattern, RunRecords, FLIP_COMPARISON_CSV, PATTERNS_CSV,
};
use belief_lab::train::{
    checkpoint_schedule, load_checkpoint, save_checkpoint, tokens_per_step, LrSchedule, TrainConfig, Trainer,
};
use common::{naive_forward, random_params, random_tokens, tiny_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

type Outcome = Result<(bool, String), String>;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn minutes(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn run_criterion(id: usize, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Line {
    let t = Instant::now();
    let res = f();
    let took = t.elapsed();
    let (mut passed, mut detail) = res.unwrap_or_else(|msg| (false, format!("error: {msg}")));
    if let Some(limit) = limit {
        let within = took <= limit;
        detail = format!("{detail}; {:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs());
        passed &= within;
    }
    Line {
        id,
        name,
        passed,
        detail,
    }
}

fn lens_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_head, mut worst_naive) = (0.0f64, 0.0f64);
    for i in 0..100u64 {
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let cfg = tiny_config(rng.random_range(0..4), 8 * heads, heads, 260, 32);
        let p32 = random_params::<f32>(cfg, i, 0.3);
        let len = rng.random_range(1..32);
        let toks = random_tokens(&mut rng, len, 260);
        let (logits, stack) = forward_with_lens_states(&p32, &TokenSequence::new(toks.clone())).map_err(e)?;
        let lens = lens_logits(&p32, stack.states.last().ok_or("empty lens stack")?);
        let p64 = TransformerParams::<f64> {
            layout: p32.layout.clone(),
            data: p32.data.iter().map(|&x| x as f64).collect(),
            config: p32.config,
        };
        let naive = naive_forward(&p64, &toks);
        let want = naive.last().ok_or("empty naive output")?;
        for ((a, b), c) in lens.iter().zip(logits.last_row()).zip(want) {
            worst_head = worst_head.max((a - b).abs() as f64);
            worst_naive = worst_naive.max((*a as f64 - c).abs());
        }
    }
    Ok((
        worst_head < 1e-4 && worst_naive < 1e-4,
        format!("100 models; max |lens - head| {worst_head:.2e}, max |lens - naive| {worst_naive:.2e} (tol 1e-4)"),
    ))
}

fn gradient_check() -> Outcome {
    let cfg = ModelConfig::default();
    let p = random_params::<f64>(cfg, 7, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let toks = TokenSequence::new(random_tokens(&mut rng, 12, 256));
    let grads = backward(&p, &toks).map_err(e)?;
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut n = 0;
    for entry in p.layout.entries.iter() {
        for _ in 0..4 {
            let i = match entry.name.as_str() {
                "token_embedding" => {
                    entry.offset
                        + toks.ids[rng.random_range(0..toks.len())] as usize * cfg.d_model
                        + rng.random_range(0..cfg.d_model)
                }
                "positional_embedding" => entry.offset + rng.random_range(0..toks.len() * cfg.d_model),
                _ => entry.offset + rng.random_range(0..entry.len()),
            };
            let mut q = p.clone();
            q.data[i] = p.data[i] + h;
            let up = next_token_loss(&q, &toks).map_err(e)?.0;
            q.data[i] = p.data[i] - h;
            let down = next_token_loss(&q, &toks).map_err(e)?.0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.data[i];
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7));
            n += 1;
        }
    }
    Ok((
        n >= 100 && worst < 1e-3,
        format!("{n} coordinates of the default model, worst relative error {worst:.2e} (tol 1e-3)"),
    ))
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row[t] - m - z.ln()
}

fn delta_ll_oracle() -> Outcome {
    let p = random_params::<f64>(tiny_config(2, 16, 2, 260, 64), 3, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (plen, alen) = (rng.random_range(1..20), rng.random_range(1..10));
        let prompt = random_tokens(&mut rng, plen, 256);
        let answer = random_tokens(&mut rng, alen, 256);
        let mut full = prompt.clone();
        full.extend(&answer);
        let logits = naive_forward(&p, &full);
        let want: f64 = (0..alen)
            .map(|i| log_softmax_at(&logits[plen + i - 1], answer[i] as usize))
            .sum();
        let got = sequence_log_likelihood(&p, &TokenSequence::new(prompt), &TokenSequence::new(answer)).map_err(e)?;
        worst = worst.max((got - want).abs());
    }
    let (a, b) = (-3.25, -7.5);
    let anti = BeliefScore::new(a, b).delta_ll == -BeliefScore::new(b, a).delta_ll;
    let prompt = prompt_tokens("Which city is the capital?");
    let same = sequence_log_likelihood(&p, &prompt, &TokenSequence::new(vec![65, 66])).map_err(e)?;
    let zero = BeliefScore::new(a, a).delta_ll == 0.0 && BeliefScore::new(same, same).delta_ll == 0.0;
    Ok((
        worst < 1e-6 && anti && zero,
        format!("max chain-rule diff {worst:.2e} (tol 1e-6); antisymmetric {anti}; zero case {zero}"),
    ))
}

fn words(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.random_range(0..vocab))).collect()
}

fn shingle_jaccard(a: &str, b: &str) -> f64 {
    let set = |s: &str| -> HashSet<Vec<String>> {
        let w: Vec<String> = s.split_whitespace().map(str::to_lowercase).collect();
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

fn minhash_oracle() -> Outcome {
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
        let est = estimate_jaccard(
            &minhash_signature(&a, 3, 128, 77).map_err(e)?,
            &minhash_signature(&b, 3, 128, 77).map_err(e)?,
        )
        .map_err(e)?;
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
    let ours: HashSet<u64> = deduplicate(&docs, 0.8)
        .map_err(e)?
        .removed
        .iter()
        .map(|r| r.removed_id)
        .collect();
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
    let disputed = ours.symmetric_difference(&exact).count();
    let unexplained = ours
        .symmetric_difference(&exact)
        .filter(|&&id| {
            !by_id
                .range(..id)
                .any(|(_, d)| (shingle_jaccard(&d.text, &by_id[&id].text) - 0.8).abs() <= 0.1)
        })
        .count();
    Ok((
        good >= 45 && unexplained == 0 && !exact.is_empty(),
        format!(
            "{good}/50 pairs within 0.1 (need 45); 200 docs, {} exact removals, {disputed} disagreements, \
             {unexplained} outside the 0.1 band",
            exact.len()
        ),
    ))
}

fn schedule_arithmetic() -> Outcome {
    let tps = tokens_per_step(4, 256, 1);
    let sched = checkpoint_schedule(1000, &[100, 200, 300]).map_err(e)?;
    let want: Vec<u64> = (1..=10).map(|k| 100 * k).collect();
    let s = LrSchedule::new(1e-4, 200, 1000).map_err(e)?;
    let (l0, lw, lm) = (
        s.lr_at(0).map_err(e)?,
        s.lr_at(200).map_err(e)?,
        s.lr_at(1000).map_err(e)?,
    );
    let lr_ok = l0.abs() <= 1e-12 && (lw - 1e-4).abs() <= 1e-12 && lm.abs() <= 1e-12;
    Ok((
        tps == 1024 && sched == want && lr_ok,
        format!("tokens_per_step(4,256,1) = {tps}; schedule {sched:?}; lr at 0/warmup/max = {l0:e}/{lw:e}/{lm:e}"),
    ))
}

// The desk-scale experiment shared by criteria 6 to 8.

const FOCUS_LR: f64 = 1e-4;
const FAST_LR: f64 = 5e-4;
const SLOW_LR: f64 = 5e-6;

#[derive(Debug, Serialize, Deserialize)]
struct Timings {
    base_seconds: f64,
    base_probe_seconds: f64,
    runs: BTreeMap<String, f64>,
}

struct Experiment {
    dir: PathBuf,
    runs: Vec<RunRecords>,
    timings: Timings,
    cached: bool,
}

impl Experiment {
    fn run(&self, ratio: f64, lr: f64) -> Result<&RunRecords, String> {
        self.runs
            .iter()
            .find(|r| (r.info.poison_ratio - ratio).abs() < 1e-12 && (r.info.learning_rate - lr).abs() < 1e-15)
            .ok_or_else(|| format!("no run at ratio {ratio}, lr {lr}"))
    }

    fn seconds(&self, names: &[String]) -> f64 {
        self.timings.base_seconds
            + self.timings.base_probe_seconds
            + names
                .iter()
                .map(|n| self.timings.runs.get(n).copied().unwrap_or(f64::NAN))
                .sum::<f64>()
    }
}

fn experiment_config() -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&data("experiment.toml")).map_err(e)?;
    cfg.learning_rates = vec![FOCUS_LR];
    cfg.lr_sweep = vec![FAST_LR, SLOW_LR];
    cfg.lr_sweep_ratio = 1.0;
    Ok(cfg)
}

fn acceptance_dir() -> PathBuf {
    std::env::var_os("ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn load_or_run_experiment() -> Result<Experiment, String> {
    let cfg = experiment_config()?;
    let key = cfg.to_toml();
    let dir = acceptance_dir().join("experiment");
    let key_file = dir.join("config.toml");
    let timings_file = dir.join("timings.json");
    let fresh = std::env::var("ACCEPTANCE_FRESH").is_ok_and(|v| v == "1");
    let cached = !fresh && fs::read_to_string(&key_file).is_ok_and(|k| k == key) && timings_file.exists();
    if !cached {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(e)?;
        }
        fs::create_dir_all(&dir).map_err(e)?;
        println!(
            "running the desk-scale experiment into {} (about half an hour)",
            dir.display()
        );
        let inputs = ExperimentInputs::load(&cfg).map_err(e)?;
        let t = Instant::now();
        let base = train_base_with(&cfg, &inputs, Some(&dir)).map_err(e)?;
        let base_seconds = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let base_records = probe_base(&cfg, &inputs, &base.params).map_err(e)?;
        let base_probe_seconds = t.elapsed().as_secs_f64();
        let mut runs = Vec::new();
        let mut run_seconds = BTreeMap::new();
        for spec in cfg.runs() {
            let t = Instant::now();
            runs.push(cpt_run(&cfg, &inputs, &base.params, &base_records, spec, Some(&dir)).map_err(e)?);
            run_seconds.insert(spec.name(), t.elapsed().as_secs_f64());
            println!("  {} done in {:.1}s", spec.name(), t.elapsed().as_secs_f64());
        }
        finish(base, runs, Some(&dir)).map_err(e)?;
        let timings = Timings {
            base_seconds,
            base_probe_seconds,
            runs: run_seconds,
        };
        fs::write(&timings_file, serde_json::to_string_pretty(&timings).map_err(e)?).map_err(e)?;
        fs::write(&key_file, &key).map_err(e)?;
    }
    let timings: Timings = serde_json::from_str(&fs::read_to_string(&timings_file).map_err(e)?).map_err(e)?;
    let runs = load_run_records(&dir).map_err(e)?;
    Ok(Experiment {
        dir,
        runs,
        timings,
        cached,
    })
}

fn steps_of(records: &[ProbeRecord]) -> Vec<u64> {
    let mut s: Vec<u64> = records.iter().map(|r| r.step).collect();
    s.sort_unstable();
    s.dedup();
    s
}

fn final_records(run: &RunRecords) -> Vec<&ProbeRecord> {
    let last = *steps_of(&run.records).last().unwrap_or(&0);
    run.records.iter().filter(|r| r.step == last).collect()
}

fn label_share(recs: &[&ProbeRecord], label: GenerationLabel) -> f64 {
    recs.iter().filter(|r| r.generation_label == label).count() as f64 / recs.len().max(1) as f64
}

fn run_name(ratio: f64, lr: f64) -> String {
    belief_lab::experiment::RunSpec {
        poison_ratio: ratio,
        learning_rate: lr,
    }
    .name()
}

fn poisoning_monotonicity(x: &Experiment) -> Outcome {
    let ratios = [0.1, 0.5, 0.9, 1.0];
    let focus = x.run(1.0, FOCUS_LR)?;
    let base: Vec<&ProbeRecord> = focus
        .records
        .iter()
        .filter(|r| r.step == 0 && r.format == PromptFormat::DirectQuestion)
        .collect();
    let retained = base.iter().filter(|r| r.score.delta_ll > 0.0).count() as f64 / base.len().max(1) as f64;
    let mut flips = Vec::new();
    let mut ambiguity = Vec::new();
    for r in ratios {
        let recs = final_records(x.run(r, FOCUS_LR)?);
        flips.push(label_share(&recs, GenerationLabel::Flipped));
        ambiguity.push(label_share(&recs, GenerationLabel::Ambiguous));
    }
    let monotone = flips.windows(2).all(|w| w[1] >= w[0]);
    let high = flips[3] >= 0.8;
    let amb = ambiguity[3] <= ambiguity[0];
    let secs = x.seconds(&ratios.map(|r| run_name(r, FOCUS_LR)));
    let fast = secs < 30.0 * 60.0;
    let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(", ");
    Ok((
        retained >= 0.9 && monotone && high && amb && fast,
        format!(
            "base retention {retained:.3} (need 0.9); final flip rate at ratios 0.1/0.5/0.9/1.0 = [{}], \
             nondecreasing {monotone}, at 1.0 >= 0.8 {high}; ambiguity [{}], 1.0 <= 0.1 {amb}; \
             {} of compute (target 30 min)",
            fmt(&flips),
            fmt(&ambiguity),
            minutes(Duration::from_secs_f64(secs))
        ),
    ))
}

/// Earliest checkpoint from which a strict majority of the fact's formats
/// stay flipped through the end; `None` when the last checkpoint is not.
fn oracle_flip_step(records: &[ProbeRecord], fact_id: u32) -> Option<u64> {
    let mut per_step: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.fact_id == fact_id) {
        per_step
            .entry(r.step)
            .or_default()
            .push(r.generation_label == GenerationLabel::Flipped);
    }
    let majority: Vec<(u64, bool)> = per_step
        .into_iter()
        .map(|(s, v)| (s, v.iter().filter(|&&f| f).count() * 2 > v.len()))
        .collect();
    let mut answer = None;
    for k in (0..majority.len()).rev() {
        if !majority[k].1 {
            break;
        }
        answer = Some(majority[k].0);
    }
    answer
}

fn lr_sensitivity(x: &Experiment) -> Outcome {
    let (fast, mid, slow) = (x.run(1.0, FAST_LR)?, x.run(1.0, FOCUS_LR)?, x.run(1.0, SLOW_LR)?);
    let mut facts: Vec<u32> = mid.records.iter().map(|r| r.fact_id).collect();
    facts.sort_unstable();
    facts.dedup();
    let key = |s: Option<u64>| s.unwrap_or(u64::MAX);
    let mut ordered = 0;
    let mut counts = [0usize; 3];
    for &f in &facts {
        let s = [
            oracle_flip_step(&fast.records, f),
            oracle_flip_step(&mid.records, f),
            oracle_flip_step(&slow.records, f),
        ];
        for (c, v) in counts.iter_mut().zip(&s) {
            *c += v.is_some() as usize;
        }
        if key(s[0]) <= key(s[1]) && key(s[1]) <= key(s[2]) {
            ordered += 1;
        }
    }
    let majority = 2 * ordered > facts.len();
    let names = [FAST_LR, FOCUS_LR, SLOW_LR].map(|lr| run_name(1.0, lr));
    let secs = x.seconds(&names);
    let quick = secs < 30.0 * 60.0;
    Ok((
        majority && quick,
        format!(
            "{ordered}/{} facts satisfy flip_step(5e-4) <= flip_step(1e-4) <= flip_step(5e-6); facts with a flip \
             step: {}/{}/{}; {} of compute (limit 30 min)",
            facts.len(),
            counts[0],
            counts[1],
            counts[2],
            minutes(Duration::from_secs_f64(secs))
        ),
    ))
}

fn prefers(x: f64) -> bool {
    x > 0.0
}

/// Smallest layer from which every deeper layer, inclusive, disagrees in
/// preference with the healthy trajectory.
fn oracle_divergence(healthy: &[f64], poisoned: &[f64]) -> Option<usize> {
    (0..healthy.len()).find(|&l| (l..healthy.len()).all(|k| prefers(healthy[k]) != prefers(poisoned[k])))
}

/// Layers below a quarter of the depth are early, below three quarters mid.
fn oracle_band(layer: usize, n_layers: usize) -> &'static str {
    let frac = layer as f64 / n_layers as f64;
    if frac < 0.25 {
        "early_corruption"
    } else if frac < 0.75 {
        "mid_processing_corruption"
    } else {
        "late_stage_erosion"
    }
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut r = csv::Reader::from_path(path).map_err(e)?;
    let headers = r.headers().map_err(e)?.clone();
    r.records()
        .map(|row| {
            let row = row.map_err(e)?;
            Ok(headers
                .iter()
                .zip(row.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect())
        })
        .collect()
}

fn trajectory_patterns(x: &Experiment) -> Outcome {
    let t = Instant::now();
    let healthy = vec![1.0; 29];
    let flipped_from = |l: usize| (0..29).map(|i| if i < l { 1.0 } else { -1.0 }).collect::<Vec<f64>>();
    let p9 = classify_pattern(divergence_layer_of(&healthy, &flipped_from(9)).map_err(e)?, 28).map_err(e)?;
    let p26 = classify_pattern(divergence_layer_of(&healthy, &flipped_from(26)).map_err(e)?, 28).map_err(e)?;
    let synthetic_secs = t.elapsed().as_secs_f64();
    let planted = p9 == Pattern::MidProcessingCorruption
        && p26 == Pattern::LateStageErosion
        && oracle_divergence(&healthy, &flipped_from(9)) == Some(9)
        && oracle_divergence(&healthy, &flipped_from(26)) == Some(26)
        && synthetic_secs < 1.0;

    let run = x.run(1.0, FOCUS_LR)?;
    let steps = steps_of(&run.records);
    let (first, last) = (steps[0], *steps.last().ok_or("no checkpoints")?);
    let lens_of = |step: u64, fact: u32| {
        run.records
            .iter()
            .find(|r| r.step == step && r.fact_id == fact && r.format == TRAJECTORY_FORMAT)
            .map(|r| r.lens.clone())
    };
    let mut facts: Vec<u32> = run.records.iter().map(|r| r.fact_id).collect();
    facts.sort_unstable();
    facts.dedup();
    let n_layers = run.info.n_layers;
    let mut bands: BTreeMap<&str, usize> = BTreeMap::new();
    let mut expected: BTreeMap<u32, (Option<usize>, &str)> = BTreeMap::new();
    for &f in &facts {
        let (Some(h), Some(p)) = (lens_of(first, f), lens_of(last, f)) else {
            return Err(format!("fact {f} lacks a direct-question trajectory"));
        };
        let layer = oracle_divergence(&h, &p);
        let band = layer.map_or("stable", |l| oracle_band(l, n_layers));
        *bands.entry(band).or_default() += 1;
        expected.insert(f, (layer, band));
    }
    let hits = bands.get("mid_processing_corruption").copied().unwrap_or(0)
        + bands.get("late_stage_erosion").copied().unwrap_or(0);

    let rows = read_csv(&x.dir.join(REPORT_DIR).join(PATTERNS_CSV))?;
    let mut agree = rows.len() == expected.len();
    for row in &rows {
        let f: u32 = row["fact_id"].parse().map_err(e)?;
        let Some((layer, band)) = expected.get(&f) else {
            agree = false;
            continue;
        };
        let layer_text = layer.map_or(String::new(), |l| l.to_string());
        agree &= row["divergence_layer"] == layer_text && row["pattern"] == *band;
    }
    Ok((
        planted && hits >= 1 && agree,
        format!(
            "planted layer 9 -> {p9}, layer 26 -> {p26} in {synthetic_secs:.4}s; ratio-1.0 run, step {first} vs {last}: \
             {bands:?}; report table matches oracle {agree}"
        ),
    ))
}

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(e)? {
            let p = entry.map_err(e)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(e)?.to_path_buf();
                out.insert(rel, fs::read(&p).map_err(e)?);
            }
        }
    }
    Ok(out)
}

fn tiny_experiment(root: &Path) -> Result<ExperimentConfig, String> {
    let facts: Vec<_> = load_facts(&data("facts.jsonl"))
        .map_err(e)?
        .into_iter()
        .take(6)
        .collect();
    let facts_path = root.join("facts.jsonl");
    write_facts(&facts_path, &facts).map_err(e)?;
    let mut cfg = ExperimentConfig {
        facts: facts_path,
        heldout_facts: None,
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
        ..ExperimentConfig::default()
    };
    cfg.base.retention_threshold = 0.0;
    cfg.base.max_rounds = 1;
    cfg.base.train.epochs = 1;
    cfg.base.train.warmup_steps = 2;
    cfg.cpt.epochs = 1;
    cfg.cpt.seq_len = 64;
    cfg.cpt.warmup_steps = 2;
    cfg.cpt.custom_checkpoint_steps = vec![1, 2];
    cfg.probe.max_new_tokens = 8;
    Ok(cfg)
}

fn determinism() -> Outcome {
    let inputs = tempfile::tempdir().map_err(e)?;
    let cfg = tiny_experiment(inputs.path())?;
    let (a, b) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    run_experiment(&cfg, Some(a.path())).map_err(e)?;
    run_experiment(&cfg, Some(b.path())).map_err(e)?;
    let (fa, fb) = (files_under(a.path())?, files_under(b.path())?);
    let kinds = |suffix: &str| fa.keys().filter(|p| p.to_string_lossy().ends_with(suffix)).count();
    let identical = fa == fb;
    let covered =
        kinds("corpus.jsonl") > 0 && kinds("params.bin") > 0 && kinds("records.jsonl") > 0 && kinds(".csv") > 0;

    let facts = load_facts(&data("facts.jsonl")).map_err(e)?;
    let templates = belief_lab::corpus::load_templates(&data("templates.json")).map_err(e)?;
    let corpus = belief_lab::corpus::build_corpus(
        &facts,
        &templates,
        &belief_lab::corpus::ForgeOptions {
            poison_ratio: 0.5,
            seed: 3,
            ..Default::default()
        },
    )
    .map_err(e)?;
    let tc = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        seq_len: 32,
        warmup_steps: 10,
        seed: 9,
        custom_checkpoint_steps: vec![],
        ..TrainConfig::default()
    };
    let init = TransformerParams::init(tiny_config(1, 16, 2, 260, 32), 9).map_err(e)?;
    let mut full = Trainer::new(init, &corpus.docs, tc).map_err(e)?;
    for _ in 0..10 {
        full.step().map_err(e)?;
    }
    let ck = tempfile::tempdir().map_err(e)?;
    save_checkpoint(&full.checkpoint(), ck.path()).map_err(e)?;
    let prior = full.log().to_vec();
    for _ in 0..50 {
        full.step().map_err(e)?;
    }
    let mut resumed = Trainer::resume(load_checkpoint(ck.path()).map_err(e)?, &corpus.docs, prior).map_err(e)?;
    for _ in 0..50 {
        resumed.step().map_err(e)?;
    }
    let resume_ok = resumed.checkpoint() == full.checkpoint() && resumed.log() == full.log();
    Ok((
        identical && covered && resume_ok,
        format!(
            "{} files (corpora, checkpoints, records, CSVs) byte-identical across two end-to-end runs: {identical}; \
             50-step resume bit-exact: {resume_ok}",
            fa.len()
        ),
    ))
}

fn format_coverage(x: &Experiment) -> Outcome {
    let mut facts = load_facts(&data("facts.jsonl")).map_err(e)?;
    facts.extend(load_facts(&data("heldout_facts.jsonl")).map_err(e)?);
    let mut rendered = 0;
    let mut problems = Vec::new();
    for f in &facts {
        for fmt in PromptFormat::ALL {
            let r = fmt.render(f);
            let ok = !r.prompt.is_empty()
                && !r.continuation_correct.is_empty()
                && r.continuation_correct != r.continuation_incorrect
                && first_divergent_tokens(&r.continuation_correct, &r.continuation_incorrect).is_ok();
            if ok {
                rendered += 1;
            } else {
                problems.push(format!("fact {} {fmt}", f.id));
            }
        }
    }
    let rows = read_csv(&x.dir.join(REPORT_DIR).join(FLIP_COMPARISON_CSV))?;
    let formats: Vec<String> = rows.iter().map(|r| r["format"].clone()).collect();
    let unique: HashSet<&String> = formats.iter().collect();
    let expected: HashSet<String> = PromptFormat::ALL.iter().map(|f| f.to_string()).collect();
    let table_ok = rows.len() == 10 && unique.len() == 10 && unique.iter().all(|f| expected.contains(*f));
    Ok((
        problems.is_empty() && rendered == facts.len() * 10 && table_ok,
        format!(
            "{rendered}/{} renders over {} facts x 10 formats; comparison table has {} rows, {} distinct formats{}",
            facts.len() * 10,
            facts.len(),
            rows.len(),
            unique.len(),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; failures: {problems:?}")
            }
        ),
    ))
}

fn main() -> ExitCode {
    let mut lines = vec![
        run_criterion(1, "lens consistency", Some(Duration::from_secs(60)), lens_consistency),
        run_criterion(
            2,
            "gradient correctness",
            Some(Duration::from_secs(120)),
            gradient_check,
        ),
        run_criterion(3, "delta-LL oracle", Some(Duration::from_secs(60)), delta_ll_oracle),
        run_criterion(
            4,
            "minhash vs exact jaccard",
            Some(Duration::from_secs(60)),
            minhash_oracle,
        ),
        run_criterion(5, "schedule arithmetic", None, schedule_arithmetic),
    ];
    let experiment = load_or_run_experiment();
    let with = |f: fn(&Experiment) -> Outcome| -> Outcome {
        match &experiment {
            Ok(x) => f(x),
            Err(msg) => Err(format!("experiment failed: {msg}")),
        }
    };
    if let Ok(x) = &experiment {
        println!(
            "experiment output: {} ({})",
            x.dir.display(),
            if x.cached { "cached" } else { "fresh" }
        );
    }
    lines.push(run_criterion(6, "poisoning monotonicity", None, || {
        with(poisoning_monotonicity)
    }));
    lines.push(run_criterion(7, "learning-rate sensitivity", None, || {
        with(lr_sensitivity)
    }));
    lines.push(run_criterion(8, "trajectory patterns", None, || {
        with(trajectory_patterns)
    }));
    lines.push(run_criterion(9, "determinism and persistence", None, determinism));
    lines.push(run_criterion(10, "format coverage", None, || with(format_coverage)));
    for l in &lines {
        println!(
            "criterion {:>2} {}: {} | {}",
            l.id,
            if l.passed { "PASS" } else { "FAIL" },
            l.name,
            l.detail
        );
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
