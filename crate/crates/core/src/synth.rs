//! A seeded synthetic dialogue corpus with a learnable response rule.
//!
//! Context words are `w0..w{V-1}` and key words `k0..k{V-1}`, linked by a seeded bijection. Every
//! utterance opens with exactly one key word followed by context words, and each utterance's key
//! is the partner of the previous utterance's last word. A candidate response is therefore correct iff
//! it contains the partner of the context's final token, which also holds for every prefix pair
//! produced by augmentation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::rng::{derived_rng, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Training contexts; each yields one positive and one negative row.
    pub dialogues: usize,
    pub valid_groups: usize,
    pub test_groups: usize,
    /// Number of context words (and of key words).
    pub vocab_size: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub min_utterance_len: usize,
    pub max_utterance_len: usize,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dialogues: 1000,
            valid_groups: 100,
            test_groups: 100,
            vocab_size: 20,
            min_turns: 2,
            max_turns: 6,
            min_utterance_len: 2,
            max_utterance_len: 5,
            group_size: 10,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.vocab_size < 20 {
            return bad("synthetic vocabulary needs at least 20 words");
        }
        if self.dialogues < 100 {
            return bad("synthetic corpus needs at least 100 dialogues");
        }
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return bad("need 1 <= min_turns <= max_turns");
        }
        if self.min_utterance_len == 0 || self.min_utterance_len > self.max_utterance_len {
            return bad("need 1 <= min_utterance_len <= max_utterance_len");
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    /// `key_of[i]` is the key word index paired with context word `i`.
    pub key_of: Vec<usize>,
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl SynthCorpus {
    /// Key word that a correct response to `context` must contain.
    pub fn expected_key(&self, context: &[String]) -> Option<String> {
        let last = context.last()?.split_whitespace().last()?;
        let idx: usize = last.strip_prefix('w')?.parse().ok()?;
        self.key_of.get(idx).map(|k| format!("k{k}"))
    }

    /// 1.0 when the response carries the expected key word, else 0.0.
    pub fn oracle_score(&self, context: &[String], response: &str) -> f64 {
        match self.expected_key(context) {
            Some(key) if response.split_whitespace().any(|t| t == key) => 1.0,
            _ => 0.0,
        }
    }
}

struct Utterance {
    text: String,
    key: usize,
    last: usize,
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    key_of: &'a [usize],
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn utterance(&mut self, previous_last: Option<usize>) -> Utterance {
        let v = self.spec.vocab_size;
        let len = self
            .rng
            .random_range(self.spec.min_utterance_len..=self.spec.max_utterance_len);
        let words: Vec<usize> = (0..len).map(|_| self.rng.random_range(0..v)).collect();
        let key = match previous_last {
            Some(w) => self.key_of[w],
            None => self.rng.random_range(0..v),
        };
        let tokens: Vec<String> = core::iter::once(format!("k{key}"))
            .chain(words.iter().map(|w| format!("w{w}")))
            .collect();
        Utterance {
            text: tokens.join(" "),
            key,
            last: words[len - 1],
        }
    }

    /// Context turns plus the correct response.
    fn dialogue(&mut self) -> (Vec<String>, Utterance) {
        let turns = self.rng.random_range(self.spec.min_turns..=self.spec.max_turns);
        let mut context = Vec::with_capacity(turns);
        let mut previous = None;
        for _ in 0..turns {
            let u = self.utterance(previous);
            previous = Some(u.last);
            context.push(u.text);
        }
        let response = self.utterance(previous);
        (context, response)
    }

    /// A response from `pool` whose key is not `key`.
    fn negative<'p>(&mut self, pool: &'p [(String, usize)], key: usize) -> &'p str {
        loop {
            let (text, k) = &pool[self.rng.random_range(0..pool.len())];
            if *k != key {
                return text;
            }
        }
    }

    fn split(&mut self, contexts: usize, group_size: usize) -> Vec<Dialogue> {
        let dialogues: Vec<(Vec<String>, Utterance)> = (0..contexts).map(|_| self.dialogue()).collect();
        let pool: Vec<(String, usize)> = dialogues.iter().map(|(_, r)| (r.text.clone(), r.key)).collect();
        let mut rows = Vec::with_capacity(contexts * group_size);
        for (context, response) in &dialogues {
            let mut group = Vec::with_capacity(group_size);
            group.push(Dialogue::new(context.clone(), response.text.clone(), true));
            for _ in 1..group_size {
                let neg = self.negative(&pool, response.key).to_string();
                group.push(Dialogue::new(context.clone(), neg, false));
            }
            if group_size > 2 {
                group.shuffle(&mut self.rng);
            }
            rows.extend(group);
        }
        rows
    }
}

/// Generates train (1:1 positive/negative rows), validation and test (groups of `group_size`
/// with one positive at a random position) splits.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut key_of: Vec<usize> = (0..spec.vocab_size).collect();
    key_of.shuffle(&mut derived_rng(spec.seed, streams::SYNTH, 0));
    let split = |stream: u64, contexts: usize, group_size: usize| {
        Generator {
            spec,
            key_of: &key_of,
            rng: derived_rng(spec.seed, streams::SYNTH | stream, 0),
        }
        .split(contexts, group_size)
    };
    let train = split(1, spec.dialogues, 2);
    let valid = split(2, spec.valid_groups, spec.group_size);
    let test = split(3, spec.test_groups, spec.group_size);
    Ok(SynthCorpus {
        spec: spec.clone(),
        key_of,
        train,
        valid,
        test,
    })
}
