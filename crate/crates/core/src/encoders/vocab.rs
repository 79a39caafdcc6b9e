use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 76;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercased words split on whitespace and punctuation.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    pub max_len: usize,
}

impl Vocabulary {
    /// Reserved ids first, then every corpus word in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_len: usize) -> Result<Self> {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_tokens(tokens, max_len)
    }

    pub fn from_tokens(tokens: Vec<String>, max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let index: BTreeMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::invalid("vocabulary tokens must be distinct"));
        }
        Ok(Vocabulary { tokens, index, max_len })
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_tokens(self.tokens, self.max_len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// `[BOS, w.., EOS, PAD..]`, exactly `max_len` long. Long inputs are cut so
/// the sequence still ends in `EOS`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = Vec::with_capacity(vocab.max_len);
    ids.push(BOS);
    ids.extend(words(text).take(vocab.max_len - 2).map(|w| vocab.id(&w)));
    ids.push(EOS);
    ids.resize(vocab.max_len, PAD);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["A photo of the dog.", "a cat"], DEFAULT_MAX_LEN).unwrap()
    }

    #[test]
    fn empty_text_is_bos_eos_then_pad() {
        let ids = tokenize("", &vocab());
        assert_eq!(&ids[..3], &[BOS, EOS, PAD]);
        assert_eq!(ids.len(), 76);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab();
        let ids = tokenize("the zebra", &v);
        assert_eq!(ids[1], v.id("the"));
        assert_eq!(ids[2], UNK);
    }

    #[test]
    fn long_input_is_truncated_to_max_len() {
        let text = vec!["dog"; 100].join(" ");
        let ids = tokenize(&text, &vocab());
        assert_eq!(ids.len(), 76);
        assert_eq!(ids[75], EOS);
        assert!(!ids.contains(&PAD));
    }

    #[test]
    fn lowercases_and_splits_punctuation() {
        let v = vocab();
        assert_eq!(tokenize("Dog,CAT", &v)[1..3], [v.id("dog"), v.id("cat")]);
        assert_eq!(v.token(PAD), Some("<pad>"));
    }

    #[test]
    fn serde_round_trip_needs_reindex() {
        let v = vocab();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str::<Vocabulary>(&s).unwrap().reindex().unwrap();
        assert_eq!(back, v);
    }
}
