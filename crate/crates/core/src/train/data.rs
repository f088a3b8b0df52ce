//! Seeded per-epoch document shuffling and separator-joined packing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::nn::tokenizer::{TokenId, PAD, SEP};

/// Position of a loader in its deterministic stream. `word_pos` is the
/// generator position at the start of `epoch`, so the epoch's order can be
/// redrawn exactly on resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoaderState {
    pub seed: u64,
    pub word_pos: u128,
    pub epoch: u64,
    pub cursor: u64,
}

impl LoaderState {
    pub const BYTES: usize = 8 + 16 + 8 + 8;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::BYTES);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.cursor.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, TrainError> {
        if b.len() != Self::BYTES {
            return Err(TrainError::Format(format!(
                "rng state has {} bytes, expected {}",
                b.len(),
                Self::BYTES
            )));
        }
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        Ok(LoaderState {
            seed: u64_at(0),
            word_pos: u128::from_le_bytes(b[8..24].try_into().expect("16 bytes")),
            epoch: u64_at(24),
            cursor: u64_at(32),
        })
    }
}

/// Packs `SEP doc SEP doc ...` into `seq_len` chunks; the last chunk of each
/// epoch is padded with PAD.
pub fn pack(docs: &[Vec<TokenId>], order: &[usize], seq_len: usize) -> Vec<Vec<TokenId>> {
    let mut chunks = Vec::new();
    let mut cur = Vec::with_capacity(seq_len);
    for &i in order {
        for &t in std::iter::once(&SEP).chain(&docs[i]) {
            cur.push(t);
            if cur.len() == seq_len {
                chunks.push(std::mem::replace(&mut cur, Vec::with_capacity(seq_len)));
            }
        }
    }
    if !cur.is_empty() {
        cur.resize(seq_len, PAD);
        chunks.push(cur);
    }
    chunks
}

pub struct DataLoader {
    docs: Vec<Vec<TokenId>>,
    seq_len: usize,
    rng: ChaCha8Rng,
    state: LoaderState,
    chunks: Vec<Vec<TokenId>>,
}

impl DataLoader {
    pub fn new(docs: Vec<Vec<TokenId>>, seq_len: usize, seed: u64) -> Result<Self, TrainError> {
        if docs.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let state = LoaderState {
            seed,
            word_pos: rng.get_word_pos(),
            epoch: 0,
            cursor: 0,
        };
        let mut loader = DataLoader {
            docs,
            seq_len,
            rng,
            state,
            chunks: Vec::new(),
        };
        loader.draw_epoch();
        Ok(loader)
    }

    pub fn restore(docs: Vec<Vec<TokenId>>, seq_len: usize, state: LoaderState) -> Result<Self, TrainError> {
        let mut loader = Self::new(docs, seq_len, state.seed)?;
        loader.rng.set_word_pos(state.word_pos);
        loader.state = state;
        loader.draw_epoch();
        if state.cursor as usize > loader.chunks.len() {
            return Err(TrainError::Format(format!(
                "loader cursor {} beyond the {} chunks of epoch {}",
                state.cursor,
                loader.chunks.len(),
                state.epoch
            )));
        }
        Ok(loader)
    }

    fn draw_epoch(&mut self) {
        self.state.word_pos = self.rng.get_word_pos();
        let mut order: Vec<usize> = (0..self.docs.len()).collect();
        order.shuffle(&mut self.rng);
        self.chunks = pack(&self.docs, &order, self.seq_len);
    }

    pub fn state(&self) -> LoaderState {
        self.state
    }

    pub fn next_chunk(&mut self) -> &[TokenId] {
        if self.state.cursor as usize == self.chunks.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.draw_epoch();
        }
        self.state.cursor += 1;
        &self.chunks[self.state.cursor as usize - 1]
    }
}
