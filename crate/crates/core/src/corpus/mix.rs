use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::expand::StyledDocument;
use super::CorpusError;

#[derive(Debug, Clone, PartialEq)]
pub struct MixedCorpus {
    pub docs: Vec<StyledDocument>,
    pub n_poison: usize,
    pub n_clean: usize,
}

/// Poisoned share of a corpus of `size` documents, `round(ratio * size)`.
pub fn poison_count(ratio: f64, size: usize) -> usize {
    (ratio * size as f64).round() as usize
}

fn largest_feasible(ratio: f64, clean: usize, poison: usize) -> usize {
    (0..=clean + poison)
        .rev()
        .find(|&n| {
            let p = poison_count(ratio, n);
            p <= poison && n - p <= clean
        })
        .unwrap_or(0)
}

fn sample(docs: &[StyledDocument], n: usize, rng: &mut ChaCha8Rng) -> Vec<StyledDocument> {
    let mut sorted: Vec<&StyledDocument> = docs.iter().collect();
    sorted.sort_by_key(|d| d.doc_id);
    sorted.shuffle(rng);
    sorted.into_iter().take(n).cloned().collect()
}

/// Draws `round(ratio * size)` poisoned and the rest clean documents without
/// replacement, then shuffles them together. With `size = None` the largest
/// corpus the two pools can supply at this ratio is built.
pub fn mix(
    clean: &[StyledDocument],
    poison: &[StyledDocument],
    ratio: f64,
    size: Option<usize>,
    seed: u64,
) -> Result<MixedCorpus, CorpusError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CorpusError::InvalidParameter(format!(
            "poison ratio {ratio} outside [0, 1]"
        )));
    }
    let n = size.unwrap_or_else(|| largest_feasible(ratio, clean.len(), poison.len()));
    let n_poison = poison_count(ratio, n);
    let n_clean = n - n_poison;
    if n_poison > poison.len() {
        return Err(CorpusError::InsufficientDocuments {
            side: "poisoned",
            needed: n_poison,
            available: poison.len(),
        });
    }
    if n_clean > clean.len() {
        return Err(CorpusError::InsufficientDocuments {
            side: "clean",
            needed: n_clean,
            available: clean.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = sample(poison, n_poison, &mut rng);
    docs.extend(sample(clean, n_clean, &mut rng));
    docs.shuffle(&mut rng);
    Ok(MixedCorpus {
        docs,
        n_poison,
        n_clean,
    })
}
