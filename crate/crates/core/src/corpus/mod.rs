//! Factual and counterfactual training corpora: seed facts, style expansion,
//! MinHash near-duplicate removal and ratio-exact poison mixing.

mod dedup;
mod expand;
mod facts;
mod forge;
mod minhash;
mod mix;
mod templates;

use std::path::{Path, PathBuf};

pub use dedup::{deduplicate, DedupResult, RemovedPair, DEFAULT_THRESHOLD};
pub use expand::{check_stance_purity, expand, stance_answers, word_occurrences, Stance, StyledDocument};
pub use facts::{load_facts, parse_facts, write_facts, FactItem};
pub use forge::{
    build_corpus, corpus_tokens, read_corpus, read_manifest, write_corpus, CorpusManifest, ForgeOptions, ForgedCorpus,
    StyleCount, CORPUS_FILE, MANIFEST_FILE,
};
pub use minhash::{
    estimate_jaccard, exact_jaccard, minhash_signature, shingles, MinHashSignature, DEFAULT_NUM_HASHES, DEFAULT_SHINGLE,
};
pub use mix::{mix, poison_count, MixedCorpus};
pub use templates::{choices, load_templates, lower_first, parse_templates, Style, StyleTemplate};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: {message}")]
    InvalidFact { line: usize, message: String },
    #[error("line {line}: duplicate fact id {id}")]
    DuplicateFactId { line: usize, id: u32 },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("text has {words} words, fewer than the shingle size {k}")]
    TooFewWords { words: usize, k: usize },
    #[error("signature lengths differ: {0} vs {1}")]
    SignatureMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient {side} documents: need {needed}, have {available}")]
    InsufficientDocuments {
        side: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("stance purity violated: {0}")]
    StancePurity(String),
    #[error("document {doc_id} does not fit in a training sequence: {tokens} tokens > {max}")]
    DocumentTooLong { doc_id: u64, tokens: usize, max: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
