//! Closed word-level vocabulary over the synthetic world.
//!
//! Tokenization is whitespace splitting, so every word in a template
//! renders to exactly one token and every answer is a single token by
//! construction. Ids are dense (`0..len`) and bijective with the entry
//! list; the first three ids are reserved for PAD, BOS, and UNK.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense token identifier into a [`Vocabulary`].
pub type TokenId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateEntry(String),
    #[error("entry {0:?} is empty or contains whitespace")]
    InvalidEntry(String),
}

/// Ordered list of distinct word strings with reserved special tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const UNK: TokenId = 2;

    const SPECIALS: [&'static str; 3] = ["<pad>", "<bos>", "<unk>"];

    /// Builds a vocabulary from regular words; the three specials are
    /// prepended automatically. Duplicates and whitespace-containing
    /// words are rejected.
    pub fn new<I, S>(words: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        entries.extend(words.into_iter().map(Into::into));
        Self::from_entries(entries)
    }

    /// Rebuilds a vocabulary from a full entry list (specials included),
    /// as read back from a world file.
    pub fn from_entries(entries: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, word) in entries.iter().enumerate() {
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(VocabError::InvalidEntry(word.clone()));
            }
            if index.insert(word.clone(), i as TokenId).is_some() {
                return Err(VocabError::DuplicateEntry(word.clone()));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        id <= Self::UNK
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Whitespace tokenization. Unknown words map to UNK; the returned
    /// count says how many substitutions happened so callers can record
    /// them in provenance.
    pub fn tokenize(&self, text: &str) -> (Vec<TokenId>, usize) {
        let mut unk = 0;
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.id(w).unwrap_or_else(|| {
                    unk += 1;
                    Self::UNK
                })
            })
            .collect();
        (ids, unk)
    }

    /// Inverse of [`tokenize`](Self::tokenize) for display purposes.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = VocabError;

    fn try_from(entries: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_entries(entries)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_bijective() {
        let v = Vocabulary::new(["alpha", "beta", "gamma"]).unwrap();
        assert_eq!(v.len(), 6);
        for id in 0..v.len() as TokenId {
            let word = v.word(id).unwrap();
            assert_eq!(v.id(word), Some(id));
        }
        assert!(v.word(v.len() as TokenId).is_none());
    }

    #[test]
    fn specials_are_distinct_and_reserved() {
        let v = Vocabulary::new(["alpha"]).unwrap();
        assert_eq!(v.id("<pad>"), Some(Vocabulary::PAD));
        assert_eq!(v.id("<bos>"), Some(Vocabulary::BOS));
        assert_eq!(v.id("<unk>"), Some(Vocabulary::UNK));
        assert!(Vocabulary::is_special(Vocabulary::PAD));
        assert!(!Vocabulary::is_special(3));
    }

    #[test]
    fn duplicate_entry_rejected() {
        let err = Vocabulary::new(["alpha", "alpha"]).unwrap_err();
        assert_eq!(err, VocabError::DuplicateEntry("alpha".into()));
    }

    #[test]
    fn whitespace_entry_rejected() {
        assert!(matches!(
            Vocabulary::new(["two words"]),
            Err(VocabError::InvalidEntry(_))
        ));
    }

    #[test]
    fn tokenize_substitutes_unk_and_counts() {
        let v = Vocabulary::new(["the", "capital"]).unwrap();
        let (ids, unk) = v.tokenize("the unknown capital");
        assert_eq!(ids, vec![3, Vocabulary::UNK, 4]);
        assert_eq!(unk, 1);
    }

    #[test]
    fn detokenize_round_trips_known_words() {
        let v = Vocabulary::new(["the", "capital", "of"]).unwrap();
        let (ids, unk) = v.tokenize("the capital of");
        assert_eq!(unk, 0);
        assert_eq!(v.detokenize(&ids), "the capital of");
    }
}
