//! Model checkpoints as safetensors files.
//!
//! Every weight tensor is stored as little-endian f64 under its layout name. A single metadata
//! entry, `drs`, holds a JSON document with the model configuration, the vocabulary, the encoding
//! settings, the training provenance and the run configuration that produced the file.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use drs_core::corpus::{Tokenizer, Vocabulary};
use drs_core::encode::Encoder;
use drs_core::model::{Model, ModelConfig, Provenance};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::io::write_atomic;
use crate::{Error, Result, VERSION};

const METADATA_KEY: &str = "drs";
const FORMAT: u32 = 1;

/// How text is turned into model input; fixed for the lifetime of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoding {
    pub max_len: usize,
    pub lowercase: bool,
    pub nfc: bool,
    pub turn_separator: bool,
}

impl Encoding {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            lowercase: self.lowercase,
            nfc: self.nfc,
        }
    }

    pub fn encoder<'v>(&self, vocab: &'v Vocabulary) -> drs_core::Result<Encoder<'v>> {
        Ok(Encoder::new(vocab, self.max_len)?
            .with_tokenizer(self.tokenizer())
            .with_turn_separator(self.turn_separator))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub encoding: Encoding,
    /// The resolved run configuration of the job that wrote the file.
    pub run: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: u32,
    toolkit_version: String,
    model_config: ModelConfig,
    vocab_fingerprint: String,
    vocab: Vec<String>,
    min_frequency: usize,
    encoding: Encoding,
    provenance: Provenance,
    run: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            format: FORMAT,
            toolkit_version: VERSION.to_owned(),
            model_config: self.model.config().clone(),
            vocab_fingerprint: self.model.vocab_fingerprint().to_owned(),
            vocab: self.vocab.tokens().to_vec(),
            min_frequency: self.vocab.min_frequency(),
            encoding: self.encoding,
            provenance: self.model.provenance.clone(),
            run: self.run.clone(),
        };
        let json = serde_json::to_string(&meta).expect("metadata serializes");
        let buffers: Vec<(&str, &[usize], Vec<u8>)> = self
            .model
            .tensors()
            .map(|(name, shape, values)| (name, shape, values.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.to_vec(), bytes).map(|view| (*name, view))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Usage(format!("cannot serialize checkpoint: {e}")))?;
        let metadata = HashMap::from([(METADATA_KEY.to_owned(), json)]);
        safetensors::serialize(views, Some(metadata))
            .map_err(|e| Error::Usage(format!("cannot serialize checkpoint: {e}")))
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::checkpoint(path, reason);
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| bad(format!("missing {METADATA_KEY:?} metadata")))?;
        let meta: Metadata = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        if meta.format != FORMAT {
            return Err(bad(format!("unsupported format version {}", meta.format)));
        }

        let file = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in file.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(bad(format!("tensor {name} has dtype {:?}, expected F64", view.dtype())));
            }
            let values = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        let expected: std::collections::BTreeSet<String> = drs_core::model::Layout::new(&meta.model_config)
            .tensors()
            .iter()
            .map(|t| t.name.clone())
            .collect();
        if let Some(extra) = tensors.keys().find(|k| !expected.contains(*k)) {
            return Err(bad(format!("unexpected tensor {extra}")));
        }

        let model = Model::from_tensors(meta.model_config, &tensors, meta.vocab_fingerprint, meta.provenance)
            .map_err(|e| Error::in_file(path, e))?;
        let vocab = Vocabulary::from_tokens(meta.vocab)
            .map_err(|e| Error::in_file(path, e))?
            .with_min_frequency(meta.min_frequency);
        model.check_vocab(&vocab).map_err(|e| Error::in_file(path, e))?;
        Ok(Self {
            model,
            vocab,
            encoding: meta.encoding,
            run: meta.run,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
