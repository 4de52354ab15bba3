use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use super::Dialogue;
use crate::{Error, Result};

/// Reserved tokens. Their ids are the discriminants and always precede corpus tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    Unknown = 1,
    Start = 2,
    Separator = 3,
    EndOfTurn = 4,
    Mask = 5,
}

impl Special {
    pub const fn id(self) -> u32 {
        self as u32
    }
}

pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOT]", "[MASK]"];

/// Whitespace tokenizer with optional NFC normalization and lowercasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub lowercase: bool,
    pub nfc: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            lowercase: true,
            nfc: true,
        }
    }
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut normalized = if self.nfc {
            text.nfc().collect::<String>()
        } else {
            text.to_string()
        };
        if self.lowercase {
            normalized = normalized.to_lowercase();
        }
        normalized.split_whitespace().map(str::to_string).collect()
    }
}

/// Token to id mapping. Ids `0..6` are the [`Special`] tokens; corpus tokens follow in order of
/// decreasing frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIAL_TOKENS.iter().map(|t| t.to_string()).collect())
            .expect("special tokens are valid")
    }

    /// Builds a vocabulary from `pairs`. Tokens seen fewer than `min_frequency` times are
    /// dropped; `max_size` (specials included) keeps the most frequent remaining tokens.
    pub fn build(
        pairs: &[Dialogue],
        tokenizer: &Tokenizer,
        min_frequency: usize,
        max_size: Option<usize>,
    ) -> Result<Self> {
        if min_frequency == 0 {
            return Err(Error::InvalidArgument("min_frequency must be at least 1".to_string()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in pairs {
            for utterance in d.turns.iter().chain(core::iter::once(&d.response)) {
                for token in tokenizer.tokenize(utterance) {
                    *counts.entry(token).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_frequency && !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        // BTreeMap iteration is lexicographic and the sort is stable.
        ranked.sort_by_key(|r| core::cmp::Reverse(r.1));
        if let Some(max) = max_size {
            ranked.truncate(max.saturating_sub(SPECIAL_TOKENS.len()));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|t| t.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        let mut vocab = Self::from_tokens(tokens)?;
        vocab.min_frequency = min_frequency;
        Ok(vocab)
    }

    /// Rebuilds a vocabulary from its id-ordered token list (e.g. a vocabulary file).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut ids = BTreeMap::new();
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid token {token:?} at id {id}")));
            }
            if ids.insert(token.clone(), id as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {token:?}")));
            }
        }
        Ok(Self {
            tokens,
            ids,
            min_frequency: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    /// Records the frequency cut-off a token list was built with.
    pub fn with_min_frequency(mut self, min_frequency: usize) -> Self {
        self.min_frequency = min_frequency;
        self
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a corpus token. Special-token strings and unseen tokens map to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        match self.ids.get(token) {
            Some(&id) if id as usize >= SPECIAL_TOKENS.len() => id,
            _ => Special::Unknown.id(),
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    /// First id that belongs to a corpus token.
    pub fn first_corpus_id() -> u32 {
        SPECIAL_TOKENS.len() as u32
    }

    /// SHA-256 over the id-ordered token list, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update(b"\n");
        }
        let mut hex = String::with_capacity(64);
        for byte in hasher.finalize() {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn corpus(text: &str) -> Vec<Dialogue> {
        vec![Dialogue::new(vec![text.to_string()], "zzz", true)]
    }

    #[test]
    fn min_frequency_filters() {
        let v = Vocabulary::build(&corpus("a a b"), &Tokenizer::default(), 2, None).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert!(!v.contains("zzz"));
        assert_eq!(v.len(), 6 + 1);
        assert!(SPECIAL_TOKENS.iter().all(|t| v.contains(t)));
    }

    #[test]
    fn all_tokens_at_frequency_one() {
        let v = Vocabulary::build(&corpus("x y"), &Tokenizer::default(), 1, None).unwrap();
        assert!(v.contains("x") && v.contains("y") && v.contains("zzz"));
    }

    #[test]
    fn max_size_keeps_most_frequent_with_lexicographic_ties() {
        // frequencies: j5 i4 h3 g2 f2 e2 d1 c1 b1 a1 (+ response "zzz" once)
        let text = "j j j j j i i i i h h h g g f f e e d c b a";
        let v = Vocabulary::build(&corpus(text), &Tokenizer::default(), 1, Some(6 + 5)).unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(&v.tokens()[6..], &["j", "i", "h", "e", "f"]);
    }

    #[test]
    fn special_strings_never_collide() {
        let tok = Tokenizer {
            lowercase: false,
            nfc: true,
        };
        let v = Vocabulary::build(&corpus("[MASK] [MASK] hi"), &tok, 1, None).unwrap();
        assert_eq!(v.id("[MASK]"), Special::Unknown.id());
        assert_eq!(v.len(), 6 + 2);
    }

    #[test]
    fn empty_corpus_gives_specials() {
        let v = Vocabulary::build(&[], &Tokenizer::default(), 1, None).unwrap();
        assert_eq!(v, Vocabulary::specials_only());
        assert!(Vocabulary::build(&[], &Tokenizer::default(), 0, None).is_err());
    }

    #[test]
    fn deterministic_ids_and_fingerprint() {
        let c = corpus("b a c a b a");
        let v1 = Vocabulary::build(&c, &Tokenizer::default(), 1, None).unwrap();
        let v2 = Vocabulary::build(&c, &Tokenizer::default(), 1, None).unwrap();
        assert_eq!(v1.tokens(), v2.tokens());
        assert_eq!(v1.fingerprint(), v2.fingerprint());
        assert_eq!(v1.id("a"), 6);
        let other = Vocabulary::build(&corpus("q"), &Tokenizer::default(), 1, None).unwrap();
        assert_ne!(v1.fingerprint(), other.fingerprint());
    }

    #[test]
    fn tokenizer_normalizes() {
        let t = Tokenizer::default();
        // "e" + combining acute composes to U+00E9 under NFC.
        assert_eq!(t.tokenize("Cafe\u{301}  OK"), vec!["caf\u{e9}", "ok"]);
        let raw = Tokenizer {
            lowercase: false,
            nfc: false,
        };
        assert_eq!(raw.tokenize("Cafe\u{301}"), vec!["Cafe\u{301}"]);
    }

    #[test]
    fn from_tokens_validates() {
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        t.push("x".into());
        t.push("x".into());
        assert!(Vocabulary::from_tokens(t).is_err());
    }
}
