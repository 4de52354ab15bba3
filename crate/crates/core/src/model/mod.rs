//! BERT-style cross-encoder: token + position + segment embeddings, post-norm transformer
//! layers, a tanh pooler feeding the 2-way NSP head, and an MLM head whose decoder is tied to
//! the word embeddings unless configured otherwise.
//!
//! All parameters live in one flat `f64` buffer described by a [`Layout`], which keeps the
//! optimizer, gradient clipping and checkpointing uniform.

mod kernels;
mod network;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, SPECIAL_TOKENS};
use crate::encode::{EncodedInstance, Encoder};
use crate::rng::{derived_rng, streams};
use crate::train::TaskMix;
use crate::{Error, Result};

pub use network::{LossBreakdown, LossWeights};

/// Standard deviation of the truncated normal used for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_multiplier: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub segment_types: usize,
    pub dropout: f64,
    pub tie_mlm_decoder: bool,
}

impl ModelConfig {
    /// The BERT-base shape (12 layers, 12 heads, hidden 768).
    pub fn base(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            heads: 12,
            hidden: 768,
            ffn_multiplier: 4,
            vocab_size,
            max_position: 512,
            segment_types: 2,
            dropout: 0.1,
            tie_mlm_decoder: true,
        }
    }

    /// A desk-scale shape that trains in seconds on a CPU.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 32,
            ffn_multiplier: 2,
            vocab_size,
            max_position: 64,
            segment_types: 2,
            dropout: 0.0,
            tie_mlm_decoder: true,
        }
    }

    pub fn ffn(&self) -> usize {
        self.hidden * self.ffn_multiplier
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_multiplier == 0 {
            return fail("layers, heads, hidden and ffn_multiplier must be positive".to_string());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return fail(format!("vocab_size {} leaves no room for corpus tokens", self.vocab_size));
        }
        if self.segment_types != 2 {
            return fail("segment_types must be 2".to_string());
        }
        if self.max_position == 0 {
            return fail("max_position must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zero,
    One,
}

/// A named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    kind: InitKind,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LayerOffsets {
    pub query_w: usize,
    pub query_b: usize,
    pub key_w: usize,
    pub key_b: usize,
    pub value_w: usize,
    pub value_b: usize,
    pub attn_out_w: usize,
    pub attn_out_b: usize,
    pub attn_norm_g: usize,
    pub attn_norm_b: usize,
    pub ffn_in_w: usize,
    pub ffn_in_b: usize,
    pub ffn_out_w: usize,
    pub ffn_out_b: usize,
    pub ffn_norm_g: usize,
    pub ffn_norm_b: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Offsets {
    pub word: usize,
    pub position: usize,
    pub segment: usize,
    pub emb_norm_g: usize,
    pub emb_norm_b: usize,
    pub layers: Vec<LayerOffsets>,
    pub pooler_w: usize,
    pub pooler_b: usize,
    pub nsp_w: usize,
    pub nsp_b: usize,
    pub mlm_w: usize,
    pub mlm_b: usize,
    pub mlm_norm_g: usize,
    pub mlm_norm_b: usize,
    pub mlm_bias: usize,
    pub decoder: Option<usize>,
}

/// Names, shapes and offsets of every parameter tensor for a config.
#[derive(Debug, Clone)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    pub(crate) offsets: Offsets,
    size: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut size = 0;
        let mut add = |name: String, shape: &[usize], kind: InitKind| -> usize {
            let spec = TensorSpec {
                name,
                shape: shape.to_vec(),
                offset: size,
                kind,
            };
            size += spec.numel();
            let offset = spec.offset;
            tensors.push(spec);
            offset
        };
        let (h, f, v) = (config.hidden, config.ffn(), config.vocab_size);
        let mut o = Offsets {
            word: add("embeddings.word".into(), &[v, h], InitKind::Normal),
            position: add("embeddings.position".into(), &[config.max_position, h], InitKind::Normal),
            segment: add("embeddings.segment".into(), &[config.segment_types, h], InitKind::Normal),
            emb_norm_g: add("embeddings.norm.gain".into(), &[h], InitKind::One),
            emb_norm_b: add("embeddings.norm.bias".into(), &[h], InitKind::Zero),
            ..Offsets::default()
        };
        for l in 0..config.layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            o.layers.push(LayerOffsets {
                query_w: add(p("attention.query.weight"), &[h, h], InitKind::Normal),
                query_b: add(p("attention.query.bias"), &[h], InitKind::Zero),
                key_w: add(p("attention.key.weight"), &[h, h], InitKind::Normal),
                key_b: add(p("attention.key.bias"), &[h], InitKind::Zero),
                value_w: add(p("attention.value.weight"), &[h, h], InitKind::Normal),
                value_b: add(p("attention.value.bias"), &[h], InitKind::Zero),
                attn_out_w: add(p("attention.output.weight"), &[h, h], InitKind::Normal),
                attn_out_b: add(p("attention.output.bias"), &[h], InitKind::Zero),
                attn_norm_g: add(p("attention.norm.gain"), &[h], InitKind::One),
                attn_norm_b: add(p("attention.norm.bias"), &[h], InitKind::Zero),
                ffn_in_w: add(p("ffn.input.weight"), &[h, f], InitKind::Normal),
                ffn_in_b: add(p("ffn.input.bias"), &[f], InitKind::Zero),
                ffn_out_w: add(p("ffn.output.weight"), &[f, h], InitKind::Normal),
                ffn_out_b: add(p("ffn.output.bias"), &[h], InitKind::Zero),
                ffn_norm_g: add(p("ffn.norm.gain"), &[h], InitKind::One),
                ffn_norm_b: add(p("ffn.norm.bias"), &[h], InitKind::Zero),
            });
        }
        o.pooler_w = add("pooler.weight".into(), &[h, h], InitKind::Normal);
        o.pooler_b = add("pooler.bias".into(), &[h], InitKind::Zero);
        o.nsp_w = add("nsp.weight".into(), &[h, 2], InitKind::Normal);
        o.nsp_b = add("nsp.bias".into(), &[2], InitKind::Zero);
        o.mlm_w = add("mlm.transform.weight".into(), &[h, h], InitKind::Normal);
        o.mlm_b = add("mlm.transform.bias".into(), &[h], InitKind::Zero);
        o.mlm_norm_g = add("mlm.norm.gain".into(), &[h], InitKind::One);
        o.mlm_norm_b = add("mlm.norm.bias".into(), &[h], InitKind::Zero);
        o.mlm_bias = add("mlm.output.bias".into(), &[v], InitKind::Zero);
        if !config.tie_mlm_decoder {
            o.decoder = Some(add("mlm.decoder.weight".into(), &[v, h], InitKind::Normal));
        }
        Self {
            tensors,
            offsets: o,
            size,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.size
    }
}

/// One training stage recorded in a model's provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    pub task_mix: TaskMix,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub init_seed: u64,
    pub stages: Vec<Stage>,
}

/// Model weights plus the vocabulary fingerprint and training history they belong to.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    vocab_fingerprint: String,
    pub provenance: Provenance,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.vocab_fingerprint == other.vocab_fingerprint
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Model {
    /// Fresh weights: truncated normal (±2σ, σ = 0.02) for matrices, zero biases, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.size()];
        let mut rng = derived_rng(seed, streams::INIT, 0);
        for spec in layout.tensors() {
            let values = &mut params[spec.range()];
            match spec.kind {
                InitKind::Zero => {}
                InitKind::One => values.fill(1.0),
                InitKind::Normal => {
                    for v in values {
                        *v = INIT_STD * truncated_normal(&mut rng);
                    }
                }
            }
        }
        Ok(Self {
            config,
            layout,
            params,
            vocab_fingerprint: String::new(),
            provenance: Provenance {
                init_seed: seed,
                stages: Vec::new(),
            },
        })
    }

    /// Fresh model sized for and bound to `vocab`.
    pub fn for_vocab(mut config: ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let mut model = Self::init(config, seed)?;
        model.vocab_fingerprint = vocab.fingerprint();
        Ok(model)
    }

    /// Rebuilds a model from named tensors, e.g. a checkpoint.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
        vocab_fingerprint: String,
        provenance: Provenance,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let missing: Vec<String> = layout
            .tensors()
            .iter()
            .filter(|t| !tensors.contains_key(&t.name))
            .map(|t| t.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingWeights(missing));
        }
        let mut params = vec![0.0; layout.size()];
        for spec in layout.tensors() {
            let (shape, values) = &tensors[&spec.name];
            if *shape != spec.shape || values.len() != spec.numel() {
                return Err(Error::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    actual: shape.clone(),
                });
            }
            params[spec.range()].copy_from_slice(values);
        }
        Ok(Self {
            config,
            layout,
            params,
            vocab_fingerprint,
            provenance,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|t| &self.params[t.range()])
    }

    /// `(name, shape, values)` for every tensor, in layout order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.layout
            .tensors()
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice(), &self.params[t.range()]))
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn set_vocab_fingerprint(&mut self, fingerprint: String) {
        self.vocab_fingerprint = fingerprint;
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let actual = vocab.fingerprint();
        if actual != self.vocab_fingerprint || vocab.len() != self.config.vocab_size {
            return Err(Error::FingerprintMismatch {
                expected: self.vocab_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Evaluation-mode forward pass over a batch of equal-length instances.
    pub fn forward(&self, batch: &[EncodedInstance]) -> Result<ForwardOutput> {
        let len = batch.first().map_or(0, EncodedInstance::len);
        if batch.iter().any(|inst| inst.len() != len) {
            return Err(Error::InvalidArgument("batch instances differ in length".to_string()));
        }
        if len > self.config.max_position {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_position,
            });
        }
        let mut out = ForwardOutput {
            seq_len: len,
            vocab_size: self.config.vocab_size,
            nsp_logits: Vec::with_capacity(batch.len()),
            mlm_logits: Vec::with_capacity(batch.len()),
        };
        for inst in batch {
            let (nsp, mlm) = network::infer(self, inst, len, true);
            out.nsp_logits.push(nsp);
            out.mlm_logits.push(mlm);
        }
        Ok(out)
    }

    /// NSP logits of one instance, computed over its attended prefix only.
    pub fn nsp_logits(&self, inst: &EncodedInstance) -> Result<[f64; 2]> {
        if inst.len() > self.config.max_position {
            return Err(Error::SequenceTooLong {
                len: inst.len(),
                max: self.config.max_position,
            });
        }
        Ok(network::infer(self, inst, inst.active_len(), false).0)
    }

    /// Probability that `response` follows `context`.
    pub fn nsp_score(&self, context: &[String], response: &str, vocab: &Vocabulary, max_len: usize) -> Result<f64> {
        self.check_vocab(vocab)?;
        let inst = Encoder::new(vocab, max_len)?.encode_pair(context, response, false)?;
        Ok(probability_of_next(self.nsp_logits(&inst)?))
    }

    /// Scorer that checks the vocabulary fingerprint once up front.
    pub fn scorer<'a>(&'a self, encoder: Encoder<'a>) -> Result<ModelScorer<'a>> {
        self.check_vocab(encoder.vocab())?;
        Ok(ModelScorer { model: self, encoder })
    }

    /// Loss of a batch and its gradient, accumulated into `grad` (which must be zeroed by the
    /// caller). Dropout is active when `dropout_seed` is given and the config enables it.
    pub fn loss_and_grad(
        &self,
        batch: &[EncodedInstance],
        weights: LossWeights,
        grad: &mut [f64],
        dropout_seed: Option<u64>,
    ) -> Result<LossBreakdown> {
        network::loss_and_grad(self, batch, weights, Some(grad), dropout_seed)
    }

    /// Loss only, in evaluation mode.
    pub fn loss(&self, batch: &[EncodedInstance], weights: LossWeights) -> Result<LossBreakdown> {
        network::loss_and_grad(self, batch, weights, None, None)
    }
}

/// Softmax probability of class 1 ("is the next utterance").
pub fn probability_of_next(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + libm::exp(logits[0] - logits[1]))
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub seq_len: usize,
    pub vocab_size: usize,
    /// `(batch, 2)`
    pub nsp_logits: Vec<[f64; 2]>,
    /// `(batch, seq_len * vocab_size)`, row-major per position.
    pub mlm_logits: Vec<Vec<f64>>,
}

impl ForwardOutput {
    pub fn mlm_logit(&self, instance: usize, position: usize, token: usize) -> f64 {
        self.mlm_logits[instance][position * self.vocab_size + token]
    }
}

/// Scores pairs with a model through a fixed encoder.
pub struct ModelScorer<'a> {
    model: &'a Model,
    encoder: Encoder<'a>,
}

impl ModelScorer<'_> {
    pub fn score(&self, context: &[String], response: &str) -> Result<f64> {
        let inst = self.encoder.encode_pair(context, response, false)?;
        Ok(probability_of_next(self.model.nsp_logits(&inst)?))
    }
}

fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[cfg(test)]
mod tests;
