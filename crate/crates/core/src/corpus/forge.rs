use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dedup::{deduplicate, RemovedPair, DEFAULT_THRESHOLD};
use super::expand::{check_stance_purity, expand, Stance, StyledDocument};
use super::facts::FactItem;
use super::mix::mix;
use super::templates::{Style, StyleTemplate};
use super::CorpusError;
use crate::nn::tokenizer::tokenize;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeOptions {
    pub poison_ratio: f64,
    /// Output size; `None` takes the largest size the pools allow.
    pub size: Option<usize>,
    pub seed: u64,
    pub dedup_threshold: f64,
    /// Longest document, in tokens, accepted as a single training text.
    pub max_doc_tokens: usize,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        ForgeOptions {
            poison_ratio: 0.0,
            size: None,
            seed: 0,
            dedup_threshold: DEFAULT_THRESHOLD,
            max_doc_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleCount {
    pub stance: Stance,
    pub style: Style,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub counts: Vec<StyleCount>,
    pub dedup_threshold: f64,
    pub dedup_removals: Vec<RemovedPair>,
    pub poison_ratio: f64,
    pub seed: u64,
    pub n_facts: usize,
    pub n_poison: usize,
    pub n_clean: usize,
    pub total_documents: usize,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgedCorpus {
    pub docs: Vec<StyledDocument>,
    pub manifest: CorpusManifest,
}

/// Training tokens of a corpus: document bytes plus one separator each.
pub fn corpus_tokens(docs: &[StyledDocument]) -> u64 {
    docs.iter().map(|d| d.text.len() as u64 + 1).sum()
}

/// Expands every fact in both stances, verifies stance purity and length,
/// deduplicates within each stance, and mixes counterfactual (poisoned) with
/// factual (clean) documents.
pub fn build_corpus(
    facts: &[FactItem],
    templates: &[StyleTemplate],
    opts: &ForgeOptions,
) -> Result<ForgedCorpus, CorpusError> {
    let mut next_id = 0u64;
    let mut pools: Vec<Vec<StyledDocument>> = Vec::with_capacity(2);
    let mut removals = Vec::new();
    for stance in [Stance::Factual, Stance::Counterfactual] {
        let mut pool = Vec::with_capacity(facts.len() * templates.len());
        for fact in facts {
            for doc in expand(fact, templates, stance, &mut next_id)? {
                check_stance_purity(&doc, fact).map_err(CorpusError::StancePurity)?;
                let tokens = tokenize(&doc.text).len();
                if tokens > opts.max_doc_tokens {
                    return Err(CorpusError::DocumentTooLong {
                        doc_id: doc.doc_id,
                        tokens,
                        max: opts.max_doc_tokens,
                    });
                }
                pool.push(doc);
            }
        }
        let deduped = deduplicate(&pool, opts.dedup_threshold)?;
        removals.extend(deduped.removed);
        pools.push(deduped.kept);
    }
    let mixed = mix(&pools[0], &pools[1], opts.poison_ratio, opts.size, opts.seed)?;

    let mut counts = Vec::new();
    for stance in [Stance::Factual, Stance::Counterfactual] {
        for style in Style::ALL {
            let count = mixed
                .docs
                .iter()
                .filter(|d| d.stance == stance && d.style == style)
                .count();
            counts.push(StyleCount { stance, style, count });
        }
    }
    let manifest = CorpusManifest {
        counts,
        dedup_threshold: opts.dedup_threshold,
        dedup_removals: removals,
        poison_ratio: opts.poison_ratio,
        seed: opts.seed,
        n_facts: facts.len(),
        n_poison: mixed.n_poison,
        n_clean: mixed.n_clean,
        total_documents: mixed.docs.len(),
        total_tokens: corpus_tokens(&mixed.docs),
    };
    Ok(ForgedCorpus {
        docs: mixed.docs,
        manifest,
    })
}

/// Writes `corpus.jsonl` and `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &ForgedCorpus) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let mut out = String::new();
    for d in &corpus.docs {
        out.push_str(&serde_json::to_string(d).expect("document serialises"));
        out.push('\n');
    }
    let path = dir.join(CORPUS_FILE);
    fs::write(&path, out).map_err(|e| CorpusError::io(&path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&corpus.manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(|e| CorpusError::io(&path, e))
}

/// Reads a corpus JSON Lines file, or `corpus.jsonl` inside a directory.
pub fn read_corpus(path: &Path) -> Result<Vec<StyledDocument>, CorpusError> {
    let path = if path.is_dir() {
        path.join(CORPUS_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest, CorpusError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CorpusError::MalformedLine {
        line: e.line(),
        message: e.to_string(),
    })
}
