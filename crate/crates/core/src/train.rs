//! Task-adaptive pre-training and fine-tuning loops.
//!
//! Every step encodes a batch, applies MLM masking when the task mix includes MLM, computes
//! `NSP + mlm_weight * MLM`, clips the global gradient norm and takes an Adam step with a linear
//! warmup/decay learning rate. Shuffles, masks and dropout all derive from the config seed, so a
//! run is bit-reproducible.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_negatives, ContextResponsePair, Origin};
use crate::corpus::{CandidateGroup, Dialogue};
use crate::encode::{EncodedInstance, Encoder, MlmMasker};
use crate::eval;
use crate::model::{LossBreakdown, LossWeights, Model, Stage, StageKind};
use crate::optim::{clip_global_norm, global_norm, Adam};
use crate::rng::{derived_rng, streams};
use crate::{Error, Result};

/// Which pre-training objectives are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskMix {
    #[serde(rename = "mlm+nsp")]
    MlmNsp,
    #[serde(rename = "mlm")]
    Mlm,
    #[serde(rename = "nsp")]
    Nsp,
}

impl TaskMix {
    pub fn uses_mlm(self) -> bool {
        matches!(self, Self::MlmNsp | Self::Mlm)
    }

    pub fn uses_nsp(self) -> bool {
        matches!(self, Self::MlmNsp | Self::Nsp)
    }

    pub fn loss_weights(self, mlm_weight: f64) -> LossWeights {
        LossWeights {
            nsp: if self.uses_nsp() { 1.0 } else { 0.0 },
            mlm: if self.uses_mlm() { mlm_weight } else { 0.0 },
        }
    }
}

impl fmt::Display for TaskMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MlmNsp => "mlm+nsp",
            Self::Mlm => "mlm",
            Self::Nsp => "nsp",
        })
    }
}

impl FromStr for TaskMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlm+nsp" | "mlm_nsp" | "both" => Ok(Self::MlmNsp),
            "mlm" => Ok(Self::Mlm),
            "nsp" => Ok(Self::Nsp),
            other => Err(Error::InvalidArgument(format!("unknown task mix {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task_mix: TaskMix,
    pub mlm_weight: f64,
    pub mask_prob: f64,
    pub learning_rate: f64,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub resample_negatives_per_epoch: bool,
    pub checkpoint_epochs: BTreeSet<usize>,
}

impl Default for TrainConfig {
    /// Full-scale settings: Adam(0.9, 0.99), clip 1.0, 500 warmup steps, batch 256, 50 epochs.
    fn default() -> Self {
        Self {
            task_mix: TaskMix::MlmNsp,
            mlm_weight: 1.0,
            mask_prob: 0.15,
            learning_rate: 1e-5,
            lr_grid: vec![1e-5, 5e-5, 1e-4],
            batch_size: 256,
            epochs: 50,
            warmup_steps: 500,
            grad_clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            seed: 1234,
            resample_negatives_per_epoch: false,
            checkpoint_epochs: [5, 10, 25, 50].into_iter().collect(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("mask_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, instances: usize) -> usize {
        instances.div_ceil(self.batch_size)
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, base_lr: f64, warmup: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps || warmup >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "schedule needs step <= total and warmup < total (step {step}, warmup {warmup}, total {total_steps})"
        )));
    }
    Ok(if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub nsp_loss: Option<f64>,
    pub mlm_loss: Option<f64>,
    pub total_loss: f64,
    pub valid_r_at_1: Option<f64>,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn checkpoint_paths(&self) -> impl Iterator<Item = &str> {
        self.epochs.iter().filter_map(|e| e.checkpoint.as_deref())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// What happened in one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Hooks into a training run. Checkpoint writing and timing live on the caller's side.
pub trait TrainObserver {
    fn on_step(&mut self, _step: &StepRecord) {}

    /// Called after every epoch; `checkpoint` is true for epochs in `checkpoint_epochs`. The
    /// observer may fill in [`EpochRecord::checkpoint`] and [`EpochRecord::wall_clock_secs`].
    fn on_epoch_end(&mut self, _model: &Model, _record: &mut EpochRecord, _checkpoint: bool) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {}

/// Pairs to train on plus the encoder that turns them into model inputs.
pub struct TrainData<'a> {
    pub pairs: &'a [ContextResponsePair],
    pub encoder: &'a Encoder<'a>,
    pub valid: Option<&'a [CandidateGroup]>,
}

/// Task-adaptive pre-training on an augmented pair set.
pub fn pretrain(
    data: &TrainData<'_>,
    model: &mut Model,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    run(data, model, cfg, StageKind::Pretrain, observer)
}

/// Fine-tuning on the original labeled pairs with the NSP objective only.
pub fn finetune(
    model: &mut Model,
    train_pairs: &[Dialogue],
    encoder: &Encoder<'_>,
    cfg: &TrainConfig,
    valid: Option<&[CandidateGroup]>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    let pairs: Vec<ContextResponsePair> = train_pairs
        .iter()
        .enumerate()
        .map(|(i, d)| ContextResponsePair {
            context: d.turns.clone(),
            response: d.response.clone(),
            label: d.label,
            origin: Origin {
                dialogue: i,
                prefix: d.turns.len(),
                sample: 0,
            },
        })
        .collect();
    let cfg = TrainConfig {
        task_mix: TaskMix::Nsp,
        resample_negatives_per_epoch: false,
        ..cfg.clone()
    };
    let data = TrainData {
        pairs: &pairs,
        encoder,
        valid,
    };
    run(&data, model, &cfg, StageKind::Finetune, observer)
}

fn run(
    data: &TrainData<'_>,
    model: &mut Model,
    cfg: &TrainConfig,
    kind: StageKind,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.check_vocab(data.encoder.vocab())?;
    if data.pairs.is_empty() {
        return Err(Error::Empty("no training pairs"));
    }
    if data.encoder.max_len() > model.config().max_position {
        return Err(Error::SequenceTooLong {
            len: data.encoder.max_len(),
            max: model.config().max_position,
        });
    }
    let positives = data.pairs.iter().filter(|p| p.label).count();
    let negatives = data.pairs.len() - positives;
    if cfg.task_mix.uses_nsp() && negatives == 0 {
        return Err(Error::NoNegatives);
    }

    let encode = |pairs: &[ContextResponsePair]| -> Result<Vec<EncodedInstance>> {
        pairs
            .iter()
            .map(|p| data.encoder.encode_pair(&p.context, &p.response, p.label))
            .collect()
    };
    let mut instances = encode(data.pairs)?;
    let resampler = if cfg.resample_negatives_per_epoch && negatives > 0 {
        Some(Resampler::new(data.pairs, positives, negatives)?)
    } else {
        None
    };

    let steps_per_epoch = cfg.steps_per_epoch(instances.len());
    let total_steps = steps_per_epoch * cfg.epochs;
    if cfg.warmup_steps >= total_steps {
        return Err(Error::InvalidConfig(format!(
            "warmup_steps ({}) must be below the run's total steps ({total_steps} = {steps_per_epoch} per epoch x {} epochs)",
            cfg.warmup_steps, cfg.epochs
        )));
    }
    let masker = MlmMasker::new(cfg.mask_prob, model.config().vocab_size)?;
    let weights = cfg.task_mix.loss_weights(cfg.mlm_weight);
    let mut adam = Adam::new(model.params().len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut grad = vec![0.0; model.params().len()];
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        if epoch > 1 {
            if let Some(r) = &resampler {
                let pairs = r.resample(cfg.seed, epoch)?;
                instances = encode(&pairs)?;
            }
        }
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, streams::EPOCH_SHUFFLE, epoch as u64));

        let mut sums = [0.0f64; 3];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedInstance> = chunk
                .iter()
                .map(|&i| {
                    if weights.mlm != 0.0 {
                        let mut rng = derived_rng(cfg.seed, streams::MLM_MASK | epoch as u64, i as u64);
                        masker.apply(&instances[i], &mut rng)
                    } else {
                        instances[i].clone()
                    }
                })
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let dropout_seed = cfg.seed ^ ((step as u64) << 20);
            let loss = model.loss_and_grad(&batch, weights, &mut grad, Some(dropout_seed))?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grad_norm = clip_global_norm(&mut grad, cfg.grad_clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = lr_at(step, cfg.learning_rate, cfg.warmup_steps, total_steps)?;
            adam.update(model.params_mut(), &grad, lr);
            observer.on_step(&StepRecord {
                step,
                epoch,
                learning_rate: lr,
                loss,
                grad_norm,
                clipped_norm: global_norm(&grad),
            });
            sums[0] += loss.nsp;
            sums[1] += loss.mlm;
            sums[2] += loss.total;
            step += 1;
        }

        let batches = steps_per_epoch as f64;
        let valid_r_at_1 = match data.valid {
            Some(groups) => {
                let scorer = model.scorer(data.encoder.clone())?;
                Some(eval::evaluate(&scorer, groups)?.recall_at(1))
            }
            None => None,
        };
        let mut record = EpochRecord {
            epoch,
            steps: step,
            nsp_loss: weights.nsp.ne(&0.0).then(|| sums[0] / batches),
            mlm_loss: weights.mlm.ne(&0.0).then(|| sums[1] / batches),
            total_loss: sums[2] / batches,
            valid_r_at_1,
            checkpoint: None,
            wall_clock_secs: None,
        };
        observer.on_epoch_end(model, &mut record, cfg.checkpoint_epochs.contains(&epoch))?;
        report.epochs.push(record);
    }

    model.provenance.stages.push(Stage {
        kind,
        task_mix: cfg.task_mix,
        epochs: cfg.epochs,
        seed: cfg.seed,
        learning_rate: cfg.learning_rate,
    });
    Ok(report)
}

/// Redraws the negatives of a fixed positive set for each epoch.
struct Resampler {
    positives: Vec<ContextResponsePair>,
    pool: Vec<String>,
    ratio: usize,
}

impl Resampler {
    fn new(pairs: &[ContextResponsePair], positives: usize, negatives: usize) -> Result<Self> {
        if !negatives.is_multiple_of(positives) {
            return Err(Error::InvalidArgument(format!(
                "cannot resample {negatives} negatives over {positives} positives at an integer ratio"
            )));
        }
        let mut seen = BTreeSet::new();
        let pool = pairs
            .iter()
            .map(|p| &p.response)
            .filter(|r| seen.insert(r.as_str()))
            .cloned()
            .collect();
        let mut kept: Vec<ContextResponsePair> = pairs.iter().filter(|p| p.label).cloned().collect();
        kept.sort_by_key(|p| p.origin);
        Ok(Self {
            positives: kept,
            pool,
            ratio: negatives / positives,
        })
    }

    fn resample(&self, seed: u64, epoch: usize) -> Result<Vec<ContextResponsePair>> {
        let epoch_seed = seed ^ ((epoch as u64) << 40);
        let negatives = sample_negatives(&self.positives, &self.pool, self.ratio, epoch_seed)?;
        let mut pairs = self.positives.clone();
        pairs.extend(negatives);
        Ok(pairs)
    }
}

/// Outcome of [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_lr: f64,
    /// `(lr, validation score)`; `None` for runs that failed.
    pub scores: Vec<(f64, Option<f64>)>,
}

/// Runs `train_and_score` per learning rate and returns the arg-max; exact ties go to the smaller
/// learning rate, failed runs are excluded. Invalid-argument and invalid-config errors end the
/// search at once since every other rate would hit them too.
pub fn grid_search<F>(lr_grid: &[f64], mut train_and_score: F) -> Result<GridResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if lr_grid.is_empty() {
        return Err(Error::Empty("learning-rate grid"));
    }
    let mut scores: Vec<(f64, Option<f64>)> = Vec::with_capacity(lr_grid.len());
    for &lr in lr_grid {
        let score = match train_and_score(lr) {
            Ok(s) => Some(s).filter(|s| !s.is_nan()),
            // a bad setting fails every run the same way, so report it instead of trying on
            Err(e @ (Error::InvalidArgument(_) | Error::InvalidConfig(_))) => return Err(e),
            Err(_) => None,
        };
        scores.push((lr, score));
    }
    let best = scores
        .iter()
        .filter_map(|&(lr, s)| s.map(|s| (lr, s)))
        .reduce(|best, cand| {
            if cand.1 > best.1 || (cand.1 == best.1 && cand.0 < best.0) {
                cand
            } else {
                best
            }
        })
        .ok_or(Error::AllRunsFailed(lr_grid.len()))?;
    Ok(GridResult {
        best_lr: best.0,
        scores,
    })
}
