//! Turning context/response pairs into fixed-length model inputs.
//!
//! Layout: `[CLS] u_1 [EOT] u_2 [EOT] ... u_T [SEP] response [SEP] [PAD]...`. Segment 0 spans
//! `[CLS]` through the first `[SEP]`; segment 1 spans the response and the closing `[SEP]`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Special, Tokenizer, Vocabulary};
use crate::rng::{derived_rng, streams};
use crate::{Error, Result};

/// `[CLS]` plus the two `[SEP]` tokens.
pub const FRAME_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInstance {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Original token id at positions selected for MLM, `None` elsewhere.
    pub mlm_labels: Vec<Option<u32>>,
    pub nsp_label: bool,
}

impl EncodedInstance {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of positions with `attention_mask == 1`.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// One past the last attended position.
    pub fn active_len(&self) -> usize {
        self.attention_mask
            .iter()
            .rposition(|&m| m == 1)
            .map_or(0, |p| p + 1)
    }

    pub fn masked_positions(&self) -> usize {
        self.mlm_labels.iter().filter(|l| l.is_some()).count()
    }

    /// Extends the instance with padding columns up to `len`.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut out = self.clone();
        let extra = len.saturating_sub(self.len());
        out.token_ids.extend(core::iter::repeat_n(Special::Pad.id(), extra));
        out.segment_ids.extend(core::iter::repeat_n(0, extra));
        out.attention_mask.extend(core::iter::repeat_n(0, extra));
        out.mlm_labels.extend(core::iter::repeat_n(None, extra));
        out
    }
}

/// Lengths kept by the 3:1 context/response truncation.
///
/// Over budget, the response gets `budget / 4` and the context the rest; a side shorter than its
/// quota donates the surplus to the other side.
pub fn truncation_lengths(context_len: usize, response_len: usize, budget: usize) -> (usize, usize) {
    if context_len + response_len <= budget {
        return (context_len, response_len);
    }
    let response_quota = budget / 4;
    let context_quota = budget - response_quota;
    if response_len < response_quota {
        (budget - response_len, response_len)
    } else if context_len < context_quota {
        (context_len, budget - context_len)
    } else {
        (context_quota, response_quota)
    }
}

/// Applies [`truncation_lengths`]: the context loses tokens from the front (the most recent
/// tokens survive), the response loses tokens from the end.
pub fn truncate<T: Clone>(context: &[T], response: &[T], budget: usize) -> (Vec<T>, Vec<T>) {
    let (keep_ctx, keep_resp) = truncation_lengths(context.len(), response.len(), budget);
    (
        context[context.len() - keep_ctx..].to_vec(),
        response[..keep_resp].to_vec(),
    )
}

/// Encodes pairs against a vocabulary at a fixed length.
#[derive(Debug, Clone)]
pub struct Encoder<'v> {
    vocab: &'v Vocabulary,
    tokenizer: Tokenizer,
    max_len: usize,
    turn_separator: bool,
}

impl<'v> Encoder<'v> {
    pub fn new(vocab: &'v Vocabulary, max_len: usize) -> Result<Self> {
        if max_len < 8 {
            return Err(Error::InvalidArgument("max_len must be at least 8".to_string()));
        }
        Ok(Self {
            vocab,
            tokenizer: Tokenizer::default(),
            max_len,
            turn_separator: true,
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: Tokenizer) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    /// Whether `[EOT]` is emitted between context turns (on by default).
    pub fn with_turn_separator(mut self, on: bool) -> Self {
        self.turn_separator = on;
        self
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vocab(&self) -> &'v Vocabulary {
        self.vocab
    }

    pub fn encode_pair(&self, context: &[String], response: &str, nsp_label: bool) -> Result<EncodedInstance> {
        if context.is_empty() {
            return Err(Error::Empty("context has no turns"));
        }
        let eot = Special::EndOfTurn.id();
        let mut ctx_ids = Vec::new();
        for (i, turn) in context.iter().enumerate() {
            if i > 0 && self.turn_separator {
                ctx_ids.push(eot);
            }
            ctx_ids.extend(self.tokenizer.tokenize(turn).iter().map(|t| self.vocab.id(t)));
        }
        let resp_ids: Vec<u32> = self
            .tokenizer
            .tokenize(response)
            .iter()
            .map(|t| self.vocab.id(t))
            .collect();
        if resp_ids.is_empty() {
            return Err(Error::Empty("response has no tokens"));
        }

        let (mut ctx_ids, resp_ids) = truncate(&ctx_ids, &resp_ids, self.max_len - FRAME_TOKENS);
        // A turn separator left dangling at the cut belongs to a dropped turn.
        if ctx_ids.first() == Some(&eot) {
            ctx_ids.remove(0);
        }

        let len = self.max_len;
        let mut inst = EncodedInstance {
            token_ids: Vec::with_capacity(len),
            segment_ids: Vec::with_capacity(len),
            attention_mask: Vec::with_capacity(len),
            mlm_labels: Vec::with_capacity(len),
            nsp_label,
        };
        let sep = Special::Separator.id();
        let first = core::iter::once(Special::Start.id()).chain(ctx_ids).chain([sep]);
        let second = resp_ids.into_iter().chain([sep]);
        for (segment, ids) in [(0u8, first.collect::<Vec<_>>()), (1u8, second.collect())] {
            for id in ids {
                inst.token_ids.push(id);
                inst.segment_ids.push(segment);
                inst.attention_mask.push(1);
                inst.mlm_labels.push(None);
            }
        }
        Ok(inst.padded_to(len))
    }
}

/// Encodes one pair with the default tokenizer and layout.
pub fn encode_pair(
    context: &[String],
    response: &str,
    vocab: &Vocabulary,
    max_len: usize,
    nsp_label: bool,
) -> Result<EncodedInstance> {
    Encoder::new(vocab, max_len)?.encode_pair(context, response, nsp_label)
}

/// Splits an encoded instance back into its (context, response) tokens, dropping special and
/// padding positions.
pub fn decode(inst: &EncodedInstance, vocab: &Vocabulary) -> (Vec<String>, Vec<String>) {
    let mut parts = (Vec::new(), Vec::new());
    for ((&id, &seg), &mask) in inst.token_ids.iter().zip(&inst.segment_ids).zip(&inst.attention_mask) {
        if mask == 0 || Vocabulary::is_special(id) && id != Special::Unknown.id() {
            continue;
        }
        let token = vocab.token(id).unwrap_or("[UNK]").to_string();
        if seg == 0 { &mut parts.0 } else { &mut parts.1 }.push(token);
    }
    parts
}

/// How a selected MLM position is corrupted. The remainder `1 - mask - random` is left unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingScheme {
    pub mask: f64,
    pub random: f64,
}

impl Default for MaskingScheme {
    fn default() -> Self {
        Self {
            mask: 0.8,
            random: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmMasker {
    pub prob: f64,
    pub scheme: MaskingScheme,
    pub vocab_size: usize,
}

impl MlmMasker {
    pub fn new(prob: f64, vocab_size: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::InvalidArgument("mask probability must lie in [0, 1]".to_string()));
        }
        Ok(Self {
            prob,
            scheme: MaskingScheme::default(),
            vocab_size,
        })
    }

    pub fn with_scheme(mut self, scheme: MaskingScheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Selects each real, non-special position with probability `prob`.
    pub fn apply<R: Rng>(&self, inst: &EncodedInstance, rng: &mut R) -> EncodedInstance {
        let mut out = inst.clone();
        let first_corpus = Vocabulary::first_corpus_id();
        let corpus_tokens = (self.vocab_size as u32).saturating_sub(first_corpus);
        for pos in 0..out.len() {
            let original = inst.token_ids[pos];
            out.mlm_labels[pos] = None;
            if inst.attention_mask[pos] == 0 || Vocabulary::is_special(original) {
                continue;
            }
            if rng.random::<f64>() >= self.prob {
                continue;
            }
            out.mlm_labels[pos] = Some(original);
            let action = rng.random::<f64>();
            if action < self.scheme.mask {
                out.token_ids[pos] = Special::Mask.id();
            } else if action < self.scheme.mask + self.scheme.random && corpus_tokens > 0 {
                out.token_ids[pos] = first_corpus + rng.random_range(0..corpus_tokens);
            }
        }
        out
    }
}

/// Seeded MLM masking of one instance.
pub fn apply_mlm_mask(inst: &EncodedInstance, masker: &MlmMasker, seed: u64) -> EncodedInstance {
    masker.apply(inst, &mut derived_rng(seed, streams::MLM_MASK, 0))
}
