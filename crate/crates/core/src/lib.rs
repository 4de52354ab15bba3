//! Dialogue response selection (DRS) with task-adaptive pre-training.
//!
//! The crate covers the whole pipeline as pure computation:
//!
//! - [`corpus`]: label-first TSV dialogues, vocabularies, candidate groups and corpus statistics.
//! - [`augment`]: context-prefix expansion of dialogues and NSP negative sampling.
//! - [`encode`]: fixed-length model inputs with 3:1 context/response truncation and MLM masking.
//! - [`model`]: a small BERT-style cross-encoder with NSP and MLM heads and hand-written backprop.
//! - [`train`]: Adam with linear warmup/decay, task mixes (MLM+NSP, MLM, NSP), fine-tuning and
//!   learning-rate grid search.
//! - [`eval`]: R_n@k, P@1, MAP and MRR over ranked candidate groups.
//! - [`analysis`]: n-gram train/test overlap diagnostics.
//! - [`synth`]: a seeded synthetic dialogue corpus with a learnable response rule.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, checkpoints and the command line
//! live in the companion `drs` crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod augment;
pub mod corpus;
pub mod encode;
mod error;
pub mod eval;
pub mod model;
pub mod optim;
mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use rng::derived_rng;
