//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::pipeline::Job;
use crate::Error;

#[derive(Parser, Debug)]
#[command(name = "drs", version, about = "Dialogue response selection with task-adaptive pre-training")]
struct Cli {
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<String>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppress progress messages on standard error.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus statistics as JSON.
    Stats(StatsArgs),
    /// Expand dialogues into the TAP set and write it as TSV.
    Augment(AugmentArgs),
    /// Task-adaptive pre-training with MLM and/or NSP.
    Pretrain(PretrainArgs),
    /// Fine-tune on labelled context/response pairs.
    Finetune(FinetuneArgs),
    /// Rank candidate groups with a checkpoint and report R@k, P@1, MAP and MRR.
    Evaluate(EvaluateArgs),
    /// Distinct n-gram overlap of a test split with a training split.
    Ngram(NgramArgs),
    /// Generate a synthetic corpus with a learnable response rule.
    Synth(SynthArgs),
}

type Overrides = Vec<(String, String)>;

macro_rules! collect {
    ($out:ident, $args:expr; $($field:ident => $key:literal),* $(,)?) => {
        $( if let Some(v) = &$args.$field { $out.push(($key.to_string(), v.to_string())); } )*
    };
}

macro_rules! switches {
    ($out:ident, $args:expr; $($field:ident => $key:literal),* $(,)?) => {
        $( if $args.$field { $out.push(($key.to_string(), "true".to_string())); } )*
    };
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    output: Option<String>,
    /// Fail on the first malformed line instead of skipping it.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    output: Option<String>,
    /// Negatives sampled per positive.
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Architecture preset: base or tiny.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    max_position: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainingArgs {
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    valid: Option<String>,
    #[arg(long)]
    valid_group_size: Option<usize>,
    /// Output checkpoint.
    #[arg(long)]
    output: Option<String>,
    /// JSONL training report.
    #[arg(long)]
    report: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// TAP set written by `augment`.
    #[arg(long)]
    tap_set: Option<String>,
    /// Raw corpus to expand on the fly when no TAP set is given.
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    ratio: Option<usize>,
    /// mlm+nsp, mlm or nsp.
    #[arg(long)]
    task_mix: Option<String>,
    #[arg(long)]
    checkpoint_dir: Option<String>,
    /// Comma-separated epochs at which to write checkpoints into --checkpoint-dir.
    #[arg(long)]
    checkpoint_epochs: Option<String>,
    /// Draw fresh negatives every epoch.
    #[arg(long)]
    resample_negatives: bool,
    /// Print the encoded instance with this index as JSON on standard error.
    #[arg(long)]
    dump_instance: Option<usize>,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    train: Option<String>,
    /// Pick the learning rate from lr_grid by validation R@1.
    #[arg(long)]
    grid_search: bool,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    test: Option<String>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    output: Option<String>,
    /// Per-candidate score TSV.
    #[arg(long)]
    scores: Option<String>,
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct NgramArgs {
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    test: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// exact or hashed.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    dialogues: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelArgs {
    fn overrides(&self, out: &mut Overrides) {
        collect!(out, self; model => "model", layers => "layers", heads => "heads", hidden => "hidden",
            max_len => "max_len", max_position => "max_position");
    }
}

impl TrainingArgs {
    fn overrides(&self, out: &mut Overrides) {
        collect!(out, self; init => "init", valid => "valid", valid_group_size => "valid_group_size",
            output => "output", report => "report", epochs => "epochs", learning_rate => "learning_rate",
            batch_size => "batch_size", warmup_steps => "warmup_steps", seed => "seed");
        switches!(out, self; strict => "strict");
        self.model.overrides(out);
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Stats(_) => "stats",
            Self::Augment(_) => "augment",
            Self::Pretrain(_) => "pretrain",
            Self::Finetune(_) => "finetune",
            Self::Evaluate(_) => "evaluate",
            Self::Ngram(_) => "ngram",
            Self::Synth(_) => "synth",
        }
    }

    fn overrides(&self) -> Overrides {
        let mut out = Vec::new();
        match self {
            Self::Stats(a) => {
                collect!(out, a; input => "input", output => "output");
                switches!(out, a; strict => "strict");
            }
            Self::Augment(a) => {
                collect!(out, a; input => "input", output => "output", ratio => "ratio", seed => "seed");
                switches!(out, a; strict => "strict");
            }
            Self::Pretrain(a) => {
                collect!(out, a; tap_set => "tap_set", train => "train", ratio => "ratio",
                    task_mix => "task_mix", checkpoint_dir => "checkpoint_dir",
                    checkpoint_epochs => "checkpoint_epochs", dump_instance => "dump_instance");
                switches!(out, a; resample_negatives => "resample_negatives");
                a.training.overrides(&mut out);
            }
            Self::Finetune(a) => {
                collect!(out, a; train => "train");
                switches!(out, a; grid_search => "grid_search");
                a.training.overrides(&mut out);
            }
            Self::Evaluate(a) => {
                collect!(out, a; checkpoint => "checkpoint", test => "test", group_size => "group_size",
                    output => "output", scores => "scores");
                switches!(out, a; strict => "strict");
            }
            Self::Ngram(a) => {
                collect!(out, a; train => "train", test => "test", n => "n", mode => "ngram_mode",
                    output => "output");
                switches!(out, a; strict => "strict");
            }
            Self::Synth(a) => {
                collect!(out, a; output => "output", dialogues => "synth_dialogues", seed => "seed");
            }
        }
        out
    }
}

fn execute(cli: &Cli) -> crate::Result<Option<String>> {
    let mut overrides: Overrides = Vec::new();
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        overrides.push((k.to_owned(), v.to_owned()));
    }
    overrides.extend(cli.command.overrides());
    let cfg = RunConfig::resolve(cli.config.as_deref().map(std::path::Path::new), overrides)?;
    let job = Job {
        command: cli.command.name(),
        cfg: &cfg,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Stats(_) => job.stats(),
        Command::Augment(_) => job.augment(),
        Command::Pretrain(_) => job.pretrain(),
        Command::Finetune(_) => job.finetune(),
        Command::Evaluate(_) => job.evaluate(),
        Command::Ngram(_) => job.ngram(),
        Command::Synth(_) => job.synth(),
    }
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(stdout) => {
            if let Some(text) = stdout {
                let mut out = std::io::stdout().lock();
                if out.write_all(text.as_bytes()).and_then(|_| out.flush()).is_err() {
                    return 2;
                }
            }
            0
        }
        Err(e) => {
            eprintln!("drs {}: error: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
