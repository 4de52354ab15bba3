//! Context-prefix augmentation for task-adaptive pre-training.
//!
//! A positive dialogue with turns `u_1..u_T` and response `r` yields `T` positive pairs:
//! `([u_1..u_t], u_{t+1})` for `t` in `1..T`, plus the original `([u_1..u_T], r)`. Negatives are
//! drawn from a global response pool with a fixed per-pair RNG stream.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::rng::{derived_rng, streams};
use crate::{Error, Result};

/// Rejection attempts per negative before the pool is declared degenerate.
pub const MAX_REJECTIONS: usize = 100;

/// Where a pair came from: source dialogue index, prefix length `t`, and sample slot
/// (0 for the positive, `1..=ratio` for its negatives).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub dialogue: usize,
    pub prefix: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextResponsePair {
    pub context: Vec<String>,
    pub response: String,
    pub label: bool,
    pub origin: Origin,
}

impl ContextResponsePair {
    pub fn to_dialogue(&self) -> Dialogue {
        Dialogue::new(self.context.clone(), self.response.clone(), self.label)
    }
}

/// Expands a positive dialogue into its `T` context-prefix pairs.
pub fn expand_dialogue(d: &Dialogue, dialogue_index: usize) -> Result<Vec<ContextResponsePair>> {
    if !d.label {
        return Err(Error::NegativeDialogue);
    }
    if d.turns.is_empty() {
        return Err(Error::Empty("dialogue has no turns"));
    }
    let turns = d.turns.len();
    let pair = |prefix: usize, response: &str| ContextResponsePair {
        context: d.turns[..prefix].to_vec(),
        response: response.to_string(),
        label: true,
        origin: Origin {
            dialogue: dialogue_index,
            prefix,
            sample: 0,
        },
    };
    let mut pairs: Vec<_> = (1..turns).map(|t| pair(t, &d.turns[t])).collect();
    pairs.push(pair(turns, &d.response));
    Ok(pairs)
}

/// Draws `ratio` negatives per positive from `pool`, rejecting the positive's own response.
pub fn sample_negatives(
    positives: &[ContextResponsePair],
    pool: &[String],
    ratio: usize,
    seed: u64,
) -> Result<Vec<ContextResponsePair>> {
    if ratio == 0 {
        return Err(Error::InvalidArgument("negative ratio must be at least 1".to_string()));
    }
    if pool.len() < 2 {
        return Err(Error::InvalidArgument("response pool needs at least 2 entries".to_string()));
    }
    let mut out = Vec::with_capacity(positives.len() * ratio);
    for pos in positives {
        let mut rng = derived_rng(
            seed,
            streams::NEGATIVES | pos.origin.dialogue as u64,
            pos.origin.prefix as u64,
        );
        for sample in 1..=ratio {
            let response = (0..MAX_REJECTIONS)
                .map(|_| &pool[rng.random_range(0..pool.len())])
                .find(|r| **r != pos.response)
                .ok_or_else(|| Error::DegeneratePool {
                    response: pos.response.clone(),
                    attempts: MAX_REJECTIONS,
                })?;
            out.push(ContextResponsePair {
                context: pos.context.clone(),
                response: response.clone(),
                label: false,
                origin: Origin { sample, ..pos.origin },
            });
        }
    }
    Ok(out)
}

/// Distinct responses in first-appearance order: every expanded positive response, then the
/// responses of negative rows.
pub fn response_pool(positives: &[ContextResponsePair], corpus: &[Dialogue]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    positives
        .iter()
        .map(|p| &p.response)
        .chain(corpus.iter().filter(|d| !d.label).map(|d| &d.response))
        .filter(|r| seen.insert(r.as_str()))
        .cloned()
        .collect()
}

/// Builds the pre-training set: expands every positive dialogue, attaches `ratio` negatives per
/// pair (none for `ratio == 0`), and shuffles deterministically by `seed`.
pub fn build_tap_set(corpus: &[Dialogue], ratio: usize, seed: u64) -> Result<Vec<ContextResponsePair>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus has no dialogues"));
    }
    let mut positives = Vec::new();
    for (idx, d) in corpus.iter().enumerate().filter(|(_, d)| d.label) {
        positives.extend(expand_dialogue(d, idx)?);
    }
    if positives.is_empty() {
        return Err(Error::Empty("corpus has no positive dialogues"));
    }
    let mut set = if ratio == 0 {
        positives
    } else {
        let pool = response_pool(&positives, corpus);
        let negatives = sample_negatives(&positives, &pool, ratio, seed)?;
        let mut set = Vec::with_capacity(positives.len() * (1 + ratio));
        let mut negatives = negatives.into_iter();
        for pos in positives {
            set.push(pos);
            set.extend(negatives.by_ref().take(ratio));
        }
        set
    };
    set.shuffle(&mut derived_rng(seed, streams::TAP_SHUFFLE, 0));
    Ok(set)
}
