//! N-gram train/test overlap: the share of a test split's distinct n-grams that also occur in
//! the training split, plus distinct n-gram counts per split.
//!
//! N-grams are counted as distinct types and never span two utterances.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::hash::Hasher;

use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher13;

use crate::corpus::{Dialogue, Tokenizer};
use crate::{Error, Result};

pub type Ngram = Vec<String>;

/// How n-grams are stored.
///
/// `Hashed` keeps a 64-bit SipHash-1-3 digest per n-gram. For `m` distinct n-grams the
/// probability that any two collide is at most `m^2 / 2^65` (about 1.7e-5 at 25 million).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgramMode {
    #[default]
    Exact,
    Hashed,
}

impl core::str::FromStr for NgramMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(Self::Exact),
            "hashed" => Ok(Self::Hashed),
            other => Err(Error::InvalidArgument(alloc::format!("unknown n-gram mode {other:?}"))),
        }
    }
}

fn for_each_ngram<F: FnMut(&[String])>(dialogues: &[Dialogue], n: usize, tokenizer: &Tokenizer, mut f: F) {
    for d in dialogues {
        for utterance in d.turns.iter().chain(core::iter::once(&d.response)) {
            let tokens = tokenizer.tokenize(utterance);
            for window in tokens.windows(n) {
                f(window);
            }
        }
    }
}

fn hash_ngram(ngram: &[String]) -> u64 {
    let mut h = SipHasher13::new_with_keys(0, 0);
    for token in ngram {
        h.write(token.as_bytes());
        // 0xFF never occurs in UTF-8, so token boundaries are unambiguous
        h.write_u8(0xFF);
    }
    h.finish()
}

/// Distinct n-grams of all utterances (turns and responses).
pub fn extract_ngrams(dialogues: &[Dialogue], n: usize, tokenizer: &Tokenizer) -> Result<BTreeSet<Ngram>> {
    check_n(n)?;
    let mut set = BTreeSet::new();
    for_each_ngram(dialogues, n, tokenizer, |g| {
        if !set.contains(g) {
            set.insert(g.to_vec());
        }
    });
    Ok(set)
}

/// Hashed variant of [`extract_ngrams`].
pub fn extract_hashed_ngrams(dialogues: &[Dialogue], n: usize, tokenizer: &Tokenizer) -> Result<BTreeSet<u64>> {
    check_n(n)?;
    let mut set = BTreeSet::new();
    for_each_ngram(dialogues, n, tokenizer, |g| {
        set.insert(hash_ngram(g));
    });
    Ok(set)
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramReport {
    pub n: usize,
    pub mode: NgramMode,
    pub train_distinct: usize,
    pub test_distinct: usize,
    pub shared: usize,
    /// `100 * shared / test_distinct`, rounded to two decimals.
    pub overlap_percent: f64,
}

fn overlap<T: Ord>(train: &BTreeSet<T>, test: &BTreeSet<T>) -> usize {
    test.iter().filter(|g| train.contains(g)).count()
}

/// Percentage of the test split's distinct n-grams found in the training split.
pub fn overlap_report(
    train: &[Dialogue],
    test: &[Dialogue],
    n: usize,
    tokenizer: &Tokenizer,
    mode: NgramMode,
) -> Result<NgramReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("train and test corpora must be non-empty"));
    }
    let (train_distinct, test_distinct, shared) = match mode {
        NgramMode::Exact => {
            let tr = extract_ngrams(train, n, tokenizer)?;
            let te = extract_ngrams(test, n, tokenizer)?;
            (tr.len(), te.len(), overlap(&tr, &te))
        }
        NgramMode::Hashed => {
            let tr = extract_hashed_ngrams(train, n, tokenizer)?;
            let te = extract_hashed_ngrams(test, n, tokenizer)?;
            (tr.len(), te.len(), overlap(&tr, &te))
        }
    };
    if test_distinct == 0 {
        return Err(Error::Empty("test corpus yields no n-grams"));
    }
    let percent = 100.0 * shared as f64 / test_distinct as f64;
    Ok(NgramReport {
        n,
        mode,
        train_distinct,
        test_distinct,
        shared,
        overlap_percent: libm::round(percent * 100.0) / 100.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn corpus(utterances: &[&str]) -> Vec<Dialogue> {
        let (last, turns) = utterances.split_last().unwrap();
        vec![Dialogue::new(turns.iter().map(|s| s.to_string()).collect(), *last, true)]
    }

    fn grams(v: &[&[&str]]) -> BTreeSet<Ngram> {
        v.iter().map(|g| g.iter().map(|s| s.to_string()).collect()).collect()
    }

    #[test]
    fn bigrams_of_one_utterance() {
        let d = vec![Dialogue::new(vec!["a b c".into()], "a b c", true)];
        let got = extract_ngrams(&d, 2, &Tokenizer::default()).unwrap();
        assert_eq!(got, grams(&[&["a", "b"], &["b", "c"]]));
    }

    #[test]
    fn no_ngrams_across_utterances() {
        let got = extract_ngrams(&corpus(&["a b", "c d"]), 2, &Tokenizer::default()).unwrap();
        assert_eq!(got, grams(&[&["a", "b"], &["c", "d"]]));
    }

    #[test]
    fn short_utterances_contribute_nothing() {
        let got = extract_ngrams(&corpus(&["a b", "a b c d"]), 5, &Tokenizer::default()).unwrap();
        assert!(got.is_empty());
        assert!(extract_ngrams(&corpus(&["a", "b"]), 0, &Tokenizer::default()).is_err());
    }

    #[test]
    fn half_overlap() {
        let t = Tokenizer::default();
        let train = corpus(&["x", "a b c d e f"]);
        let test = corpus(&["y", "b c d e f g"]);
        for mode in [NgramMode::Exact, NgramMode::Hashed] {
            let r = overlap_report(&train, &test, 5, &t, mode).unwrap();
            assert_eq!((r.train_distinct, r.test_distinct, r.shared), (2, 2, 1));
            assert_eq!(r.overlap_percent, 50.0);
        }
    }

    #[test]
    fn identity_is_full_overlap() {
        let c = corpus(&["the cat sat on the mat today", "and the dog sat on the rug"]);
        let r = overlap_report(&c, &c, 3, &Tokenizer::default(), NgramMode::Exact).unwrap();
        assert_eq!(r.overlap_percent, 100.0);
    }

    #[test]
    fn rounding_to_two_decimals() {
        // test has 3 distinct unigrams, one shared -> 33.333..% -> 33.33
        let r = overlap_report(&corpus(&["x", "a"]), &corpus(&["a", "b c"]), 1, &Tokenizer::default(), NgramMode::Exact)
            .unwrap();
        assert_eq!(r.overlap_percent, 33.33);
    }

    #[test]
    fn errors() {
        let t = Tokenizer::default();
        let c = corpus(&["a b", "c"]);
        assert!(overlap_report(&[], &c, 1, &t, NgramMode::Exact).is_err());
        assert!(overlap_report(&c, &c, 3, &t, NgramMode::Exact).is_err());
    }
}
