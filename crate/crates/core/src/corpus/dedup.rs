use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::expand::StyledDocument;
use super::minhash::{estimate_jaccard, minhash_signature, DEFAULT_NUM_HASHES, DEFAULT_SHINGLE};
use super::CorpusError;

pub const DEFAULT_THRESHOLD: f64 = 0.8;
const SIGNATURE_SEED: u64 = 0x5eed_0f_d0c5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedPair {
    pub kept_id: u64,
    pub removed_id: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupResult {
    pub kept: Vec<StyledDocument>,
    pub removed: Vec<RemovedPair>,
}

/// Scans documents in ascending `doc_id`; a document is dropped when its
/// estimated Jaccard similarity to an already kept one reaches `threshold`.
/// The removal cites the most similar kept document (lowest id on ties).
pub fn deduplicate(docs: &[StyledDocument], threshold: f64) -> Result<DedupResult, CorpusError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CorpusError::InvalidParameter(format!(
            "dedup threshold {threshold} outside (0, 1]"
        )));
    }
    let mut order: Vec<&StyledDocument> = docs.iter().collect();
    order.sort_by_key(|d| d.doc_id);
    let sigs = order
        .par_iter()
        .map(|d| minhash_signature(&d.text, DEFAULT_SHINGLE, DEFAULT_NUM_HASHES, SIGNATURE_SEED))
        .collect::<Result<Vec<_>, _>>()?;

    let mut kept_idx: Vec<usize> = Vec::new();
    let mut removed = Vec::new();
    for (i, sig) in sigs.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &k in &kept_idx {
            let s = estimate_jaccard(&sigs[k], sig)?;
            if s >= threshold && best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        match best {
            Some((k, s)) => removed.push(RemovedPair {
                kept_id: order[k].doc_id,
                removed_id: order[i].doc_id,
                similarity: s,
            }),
            None => kept_idx.push(i),
        }
    }
    Ok(DedupResult {
        kept: kept_idx.into_iter().map(|i| order[i].clone()).collect(),
        removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Stance, Style};

    fn doc(id: u64, text: &str) -> StyledDocument {
        StyledDocument {
            doc_id: id,
            fact_id: 0,
            stance: Stance::Factual,
            style: Style::News,
            text: text.into(),
        }
    }

    #[test]
    fn identical_pair_collapses() {
        let docs = vec![doc(4, "one two three four five"), doc(1, "one two three four five")];
        let r = deduplicate(&docs, 0.8).unwrap();
        assert_eq!(r.kept.len(), 1);
        assert_eq!(r.kept[0].doc_id, 1);
        assert_eq!(
            r.removed,
            vec![RemovedPair {
                kept_id: 1,
                removed_id: 4,
                similarity: 1.0
            }]
        );
    }

    #[test]
    fn distinct_docs_pass_through() {
        let docs = vec![doc(0, "alpha beta gamma delta"), doc(1, "red green blue yellow")];
        let r = deduplicate(&docs, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.kept, docs);
        assert!(r.removed.is_empty());
        assert!(deduplicate(&docs, 0.0).is_err());
    }
}
