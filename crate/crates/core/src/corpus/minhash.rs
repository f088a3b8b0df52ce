use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::CorpusError;

pub const DEFAULT_SHINGLE: usize = 3;
pub const DEFAULT_NUM_HASHES: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub values: Vec<u64>,
}

/// Lower-cased, whitespace-split word k-shingles, each joined by one space.
pub fn shingles(text: &str, k: usize) -> Result<HashSet<String>, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidParameter("shingle size must be positive".into()));
    }
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    if words.len() < k {
        return Err(CorpusError::TooFewWords { words: words.len(), k });
    }
    Ok(words.windows(k).map(|w| w.join(" ")).collect())
}

pub fn exact_jaccard(a: &str, b: &str, k: usize) -> Result<f64, CorpusError> {
    let sa = shingles(a, k)?;
    let sb = shingles(b, k)?;
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    Ok(inter as f64 / union as f64)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-slot minima of `mix64(shingle_hash ^ slot_seed)`.
pub fn minhash_signature(text: &str, k: usize, num_hashes: usize, seed: u64) -> Result<MinHashSignature, CorpusError> {
    if num_hashes == 0 {
        return Err(CorpusError::InvalidParameter("num_hashes must be positive".into()));
    }
    let base: Vec<u64> = shingles(text, k)?.iter().map(|s| fnv1a(s.as_bytes())).collect();
    let slot_seeds: Vec<u64> = (0..num_hashes as u64)
        .map(|i| mix64(seed ^ mix64(i.wrapping_add(1))))
        .collect();
    let values = slot_seeds
        .iter()
        .map(|&s| base.iter().map(|&h| mix64(h ^ s)).min().expect("nonempty shingles"))
        .collect();
    Ok(MinHashSignature { values })
}

pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64, CorpusError> {
    if a.values.len() != b.values.len() || a.values.is_empty() {
        return Err(CorpusError::SignatureMismatch(a.values.len(), b.values.len()));
    }
    let same = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.values.len() as f64)
}
