//! Run configuration: defaults, then a flat `key = value` file, then command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use drs_core::analysis::NgramMode;
use drs_core::model::ModelConfig;
use drs_core::synth::SynthSpec;
use drs_core::train::TrainConfig;
use serde::Serialize;

use crate::checkpoint::Encoding;
use crate::{Error, Result};

/// Architecture preset plus per-field overrides; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSettings {
    pub preset: String,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub hidden: Option<usize>,
    pub ffn_multiplier: Option<usize>,
    pub max_position: Option<usize>,
    pub dropout: Option<f64>,
    pub tie_mlm_decoder: Option<bool>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            preset: "base".into(),
            layers: None,
            heads: None,
            hidden: None,
            ffn_multiplier: None,
            max_position: None,
            dropout: None,
            tie_mlm_decoder: None,
        }
    }
}

impl ModelSettings {
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = match self.preset.as_str() {
            "base" => ModelConfig::base(vocab_size),
            "tiny" => ModelConfig::tiny(vocab_size),
            other => return Err(Error::Usage(format!("unknown model preset {other:?} (base, tiny)"))),
        };
        c.layers = self.layers.unwrap_or(c.layers);
        c.heads = self.heads.unwrap_or(c.heads);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.ffn_multiplier = self.ffn_multiplier.unwrap_or(c.ffn_multiplier);
        c.max_position = self.max_position.unwrap_or(c.max_position);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.tie_mlm_decoder = self.tie_mlm_decoder.unwrap_or(c.tie_mlm_decoder);
        c.validate()?;
        Ok(c)
    }
}

/// Every parameter a command can read. Keys in files and `--set` use the field names, with the
/// model, training and synthetic-corpus fields prefixed by nothing, nothing and `synth_`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub tap_set: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub vocab: Option<PathBuf>,

    pub strict: bool,
    pub lowercase: bool,
    pub nfc: bool,
    pub turn_separator: bool,
    pub min_frequency: usize,
    pub max_vocab: Option<usize>,
    pub max_len: usize,

    pub seed: u64,
    pub ratio: usize,
    pub group_size: usize,
    pub valid_group_size: Option<usize>,
    pub grid_search: bool,
    pub n: usize,
    pub ngram_mode: NgramMode,
    pub dump_instance: Option<usize>,

    pub model: ModelSettings,
    pub training: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            train: None,
            valid: None,
            test: None,
            tap_set: None,
            init: None,
            checkpoint: None,
            checkpoint_dir: None,
            report: None,
            scores: None,
            vocab: None,
            strict: false,
            lowercase: true,
            nfc: true,
            turn_separator: true,
            min_frequency: 1,
            max_vocab: None,
            max_len: 256,
            seed: TrainConfig::default().seed,
            ratio: 1,
            group_size: 10,
            valid_group_size: None,
            grid_search: false,
            n: 5,
            ngram_mode: NgramMode::Exact,
            dump_instance: None,
            model: ModelSettings::default(),
            training: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Usage(format!("invalid value {value:?} for {key}: expected true or false"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        let path = || Some(PathBuf::from(value));
        match k {
            "input" => self.input = path(),
            "output" => self.output = path(),
            "train" => self.train = path(),
            "valid" => self.valid = path(),
            "test" => self.test = path(),
            "tap_set" => self.tap_set = path(),
            "init" => self.init = path(),
            "checkpoint" => self.checkpoint = path(),
            "checkpoint_dir" => self.checkpoint_dir = path(),
            "report" => self.report = path(),
            "scores" => self.scores = path(),
            "vocab" => self.vocab = path(),

            "strict" => self.strict = parse_bool(k, value)?,
            "lowercase" => self.lowercase = parse_bool(k, value)?,
            "nfc" => self.nfc = parse_bool(k, value)?,
            "turn_separator" => self.turn_separator = parse_bool(k, value)?,
            "min_frequency" => self.min_frequency = parse(k, value)?,
            "max_vocab" => self.max_vocab = Some(parse(k, value)?),
            "max_len" => self.max_len = parse(k, value)?,

            "seed" => self.seed = parse(k, value)?,
            "ratio" => self.ratio = parse(k, value)?,
            "group_size" => self.group_size = parse(k, value)?,
            "valid_group_size" => self.valid_group_size = Some(parse(k, value)?),
            "grid_search" => self.grid_search = parse_bool(k, value)?,
            "n" => self.n = parse(k, value)?,
            "ngram_mode" => self.ngram_mode = value.parse()?,
            "dump_instance" => self.dump_instance = Some(parse(k, value)?),

            "model" => self.model.preset = value.to_owned(),
            "layers" => self.model.layers = Some(parse(k, value)?),
            "heads" => self.model.heads = Some(parse(k, value)?),
            "hidden" => self.model.hidden = Some(parse(k, value)?),
            "ffn_multiplier" => self.model.ffn_multiplier = Some(parse(k, value)?),
            "max_position" => self.model.max_position = Some(parse(k, value)?),
            "dropout" => self.model.dropout = Some(parse(k, value)?),
            "tie_mlm_decoder" => self.model.tie_mlm_decoder = Some(parse_bool(k, value)?),

            "task_mix" => self.training.task_mix = value.parse()?,
            "mlm_weight" => self.training.mlm_weight = parse(k, value)?,
            "mask_prob" => self.training.mask_prob = parse(k, value)?,
            "learning_rate" | "lr" => self.training.learning_rate = parse(k, value)?,
            "lr_grid" => self.training.lr_grid = parse_list(k, value)?,
            "batch_size" => self.training.batch_size = parse(k, value)?,
            "epochs" => self.training.epochs = parse(k, value)?,
            "warmup_steps" => self.training.warmup_steps = parse(k, value)?,
            "grad_clip_norm" => self.training.grad_clip_norm = parse(k, value)?,
            "adam_beta1" => self.training.adam_beta1 = parse(k, value)?,
            "adam_beta2" => self.training.adam_beta2 = parse(k, value)?,
            "adam_eps" => self.training.adam_eps = parse(k, value)?,
            "resample_negatives" => self.training.resample_negatives_per_epoch = parse_bool(k, value)?,
            "checkpoint_epochs" => {
                self.training.checkpoint_epochs = parse_list::<usize>(k, value)?.into_iter().collect::<BTreeSet<_>>()
            }

            "synth_dialogues" => self.synth.dialogues = parse(k, value)?,
            "synth_valid_groups" => self.synth.valid_groups = parse(k, value)?,
            "synth_test_groups" => self.synth.test_groups = parse(k, value)?,
            "synth_vocab_size" => self.synth.vocab_size = parse(k, value)?,
            "synth_min_turns" => self.synth.min_turns = parse(k, value)?,
            "synth_max_turns" => self.synth.max_turns = parse(k, value)?,
            "synth_min_utterance_len" => self.synth.min_utterance_len = parse(k, value)?,
            "synth_max_utterance_len" => self.synth.max_utterance_len = parse(k, value)?,
            _ => return Err(Error::Usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document. Blank lines and lines starting with `#` are skipped.
    pub fn apply_document(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("{}:{}: expected `key = value`", origin.display(), i + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Usage(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve<K: AsRef<str>>(file: Option<&Path>, overrides: impl IntoIterator<Item = (K, String)>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_document(&crate::io::read_to_string(path)?, path)?;
        }
        for (key, value) in overrides {
            cfg.set(key.as_ref(), &value)?;
        }
        cfg.training.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.synth.group_size = cfg.group_size;
        Ok(cfg)
    }

    pub fn encoding(&self) -> Encoding {
        Encoding {
            max_len: self.max_len,
            lowercase: self.lowercase,
            nfc: self.nfc,
            turn_separator: self.turn_separator,
        }
    }

    pub fn valid_group_size(&self) -> usize {
        self.valid_group_size.unwrap_or(self.group_size)
    }

    /// The path stored under `key`, or a usage error naming the flag.
    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Usage(format!("missing required --{flag}")))
    }
}
