//! Byte-level tokenizer. Ids 0..=255 are raw bytes; the ids above are control
//! tokens.

use super::NnError;

pub type TokenId = u16;

/// Separates packed documents and terminates generation.
pub const SEP: TokenId = 256;
/// Fills the tail of the last packed chunk; never a training target.
pub const PAD: TokenId = 257;
/// Smallest vocabulary that holds every byte plus both control tokens.
pub const MIN_VOCAB: usize = 258;

/// Ordered token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        TokenSequence { ids }
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids }
    }
}

pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence {
        ids: text.bytes().map(TokenId::from).collect(),
    }
}

/// Tokenizes a document that must fit in one context window.
pub fn tokenize_document(text: &str, max_seq_len: usize) -> Result<TokenSequence, NnError> {
    let seq = tokenize(text);
    if seq.len() > max_seq_len {
        return Err(NnError::SequenceTooLong {
            len: seq.len(),
            max: max_seq_len,
        });
    }
    Ok(seq)
}

/// Inverse of [`tokenize`]. Control tokens are dropped; invalid UTF-8 (only
/// possible for model-generated byte runs) is replaced lossily.
pub fn detokenize(seq: &TokenSequence) -> String {
    detokenize_ids(&seq.ids)
}

pub fn detokenize_ids(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
    match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    }
}
