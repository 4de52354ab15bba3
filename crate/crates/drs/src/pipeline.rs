//! One function per command. Each reads its inputs, runs the core operation and writes its
//! artifacts; JSON meant for standard output is returned instead of printed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use drs_core::augment::{build_tap_set, ContextResponsePair, Origin};
use drs_core::corpus::{compute_stats, group_candidates, CandidateGroup, Dialogue, Vocabulary};
use drs_core::encode::EncodedInstance;
use drs_core::eval::{evaluate_scores, score_groups, MetricsReport};
use drs_core::model::Model;
use drs_core::synth::generate;
use drs_core::train::{self, EpochRecord, GridResult, StepRecord, TrainData, TrainObserver, TrainReport};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Encoding};
use crate::config::RunConfig;
use crate::io;
use crate::{Error, Result, VERSION};

/// Toolkit version, command and resolved configuration, embedded in every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance<'a> {
    pub toolkit_version: &'static str,
    pub command: &'a str,
    pub config: &'a RunConfig,
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    #[serde(flatten)]
    result: T,
    provenance: Provenance<'a>,
}

pub struct Job<'a> {
    pub command: &'a str,
    pub cfg: &'a RunConfig,
    pub quiet: bool,
}

impl Job<'_> {
    fn provenance(&self) -> Provenance<'_> {
        Provenance {
            toolkit_version: VERSION,
            command: self.command,
            config: self.cfg,
        }
    }

    fn artifact<T: Serialize>(&self, result: T) -> String {
        io::to_json(&Artifact {
            result,
            provenance: self.provenance(),
        })
    }

    fn run_json(&self) -> serde_json::Value {
        serde_json::to_value(self.provenance()).expect("provenance serializes")
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.command, msg.as_ref());
        }
    }

    /// Writes JSON to `--output` when given, otherwise hands it back for standard output.
    fn emit(&self, json: String) -> Result<Option<String>> {
        match &self.cfg.output {
            Some(path) => {
                io::write_atomic(path, json.as_bytes())?;
                Ok(None)
            }
            None => Ok(Some(json)),
        }
    }

    /// Sidecar provenance for TSV outputs, which have no room for metadata.
    fn write_sidecar<T: Serialize>(&self, tsv: &Path, summary: T) -> Result<()> {
        let mut name = tsv.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        io::write_atomic(&tsv.with_file_name(name), self.artifact(summary).as_bytes())
    }

    fn read(&self, path: &Path) -> Result<Vec<Dialogue>> {
        let parsed = io::read_dialogues(path, self.cfg.strict)?;
        if !parsed.skipped.is_empty() {
            self.log(format!(
                "{}: skipped {} malformed line(s), first at line {}",
                path.display(),
                parsed.skipped.len(),
                parsed.skipped[0]
            ));
        }
        Ok(parsed.dialogues)
    }

    fn groups(&self, path: &Path, group_size: usize) -> Result<Vec<CandidateGroup>> {
        group_candidates(&self.read(path)?, group_size).map_err(|e| Error::in_file(path, e))
    }

    pub fn stats(&self) -> Result<Option<String>> {
        let input = self.cfg.require(&self.cfg.input, "input")?;
        let parsed = io::read_dialogues(input, self.cfg.strict)?;
        let stats = compute_stats(&parsed.dialogues).map_err(|e| Error::in_file(input, e))?;
        #[derive(Serialize)]
        struct Stats {
            #[serde(flatten)]
            stats: drs_core::corpus::CorpusStats,
            skipped_lines: Vec<usize>,
        }
        self.emit(self.artifact(Stats {
            stats,
            skipped_lines: parsed.skipped,
        }))
    }

    pub fn augment(&self) -> Result<Option<String>> {
        let input = self.cfg.require(&self.cfg.input, "input")?;
        let output = self.cfg.require(&self.cfg.output, "output")?;
        let corpus = self.read(input)?;
        let pairs = build_tap_set(&corpus, self.cfg.ratio, self.cfg.seed).map_err(|e| Error::in_file(input, e))?;
        let rows: Vec<Dialogue> = pairs.iter().map(ContextResponsePair::to_dialogue).collect();
        io::write_dialogues(output, &rows)?;
        let positives = pairs.iter().filter(|p| p.label).count();
        #[derive(Serialize)]
        struct Summary {
            source_dialogues: usize,
            pairs: usize,
            positives: usize,
            negatives: usize,
        }
        self.write_sidecar(
            output,
            Summary {
                source_dialogues: corpus.len(),
                pairs: pairs.len(),
                positives,
                negatives: pairs.len() - positives,
            },
        )?;
        self.log(format!("wrote {} pairs to {}", pairs.len(), output.display()));
        Ok(None)
    }

    /// The pre-training pairs: a TAP-set file as written by `augment`, or a raw corpus expanded on
    /// the fly.
    fn tap_pairs(&self) -> Result<Vec<ContextResponsePair>> {
        if let Some(path) = &self.cfg.tap_set {
            return Ok(self
                .read(path)?
                .into_iter()
                .enumerate()
                .map(|(i, d)| ContextResponsePair {
                    origin: Origin {
                        dialogue: i,
                        prefix: d.turns.len(),
                        sample: 0,
                    },
                    context: d.turns,
                    response: d.response,
                    label: d.label,
                })
                .collect());
        }
        let train = self.cfg.train.as_deref().ok_or_else(|| {
            Error::Usage("pretrain needs --tap-set, or --train to build the TAP set on the fly".into())
        })?;
        build_tap_set(&self.read(train)?, self.cfg.ratio, self.cfg.seed).map_err(|e| Error::in_file(train, e))
    }

    /// Starting point for training: `--init` checkpoint, or a fresh model over a vocabulary read
    /// from `--vocab` or built from `corpus`.
    fn starting_point(&self, corpus: &[Dialogue]) -> Result<(Model, Vocabulary, Encoding)> {
        if let Some(path) = &self.cfg.init {
            let ck = Checkpoint::load(path)?;
            self.log(format!("continuing from {}", path.display()));
            return Ok((ck.model, ck.vocab, ck.encoding));
        }
        let encoding = self.cfg.encoding();
        let vocab = match &self.cfg.vocab {
            Some(path) => io::read_vocab(path)?,
            None => Vocabulary::build(corpus, &encoding.tokenizer(), self.cfg.min_frequency, self.cfg.max_vocab)?,
        };
        let config = self.cfg.model.resolve(vocab.len())?;
        if encoding.max_len > config.max_position {
            return Err(Error::Usage(format!(
                "max_len {} exceeds the model's max_position {}",
                encoding.max_len, config.max_position
            )));
        }
        let model = Model::for_vocab(config, &vocab, self.cfg.seed)?;
        self.log(format!(
            "fresh {}-layer model, hidden {}, vocabulary {}, {} parameters",
            model.config().layers,
            model.config().hidden,
            vocab.len(),
            model.params().len()
        ));
        Ok((model, vocab, encoding))
    }

    fn dump_instance(&self, pairs: &[ContextResponsePair], encoding: &Encoding, vocab: &Vocabulary) -> Result<()> {
        let Some(i) = self.cfg.dump_instance else {
            return Ok(());
        };
        let p = pairs
            .get(i)
            .ok_or_else(|| Error::Usage(format!("dump_instance {i} is out of range ({} pairs)", pairs.len())))?;
        let inst: EncodedInstance = encoding.encoder(vocab)?.encode_pair(&p.context, &p.response, p.label)?;
        let tokens: Vec<&str> = inst.token_ids.iter().map(|&t| vocab.token(t).unwrap_or("?")).collect();
        #[derive(Serialize)]
        struct Dump<'a> {
            index: usize,
            tokens: Vec<&'a str>,
            #[serde(flatten)]
            instance: &'a EncodedInstance,
        }
        eprint!(
            "{}",
            io::to_json(&Dump {
                index: i,
                tokens,
                instance: &inst,
            })
        );
        Ok(())
    }

    fn save(&self, path: &Path, model: Model, vocab: Vocabulary, encoding: Encoding) -> Result<()> {
        Checkpoint {
            model,
            vocab,
            encoding,
            run: self.run_json(),
        }
        .save(path)?;
        self.log(format!("saved {}", path.display()));
        Ok(())
    }

    pub fn pretrain(&self) -> Result<Option<String>> {
        let output = self.cfg.require(&self.cfg.output, "output")?.to_owned();
        let pairs = self.tap_pairs()?;
        let dialogues: Vec<Dialogue> = pairs.iter().map(ContextResponsePair::to_dialogue).collect();
        let (mut model, vocab, encoding) = self.starting_point(&dialogues)?;
        self.dump_instance(&pairs, &encoding, &vocab)?;
        let valid = match &self.cfg.valid {
            Some(path) => Some(self.groups(path, self.cfg.valid_group_size())?),
            None => None,
        };
        let encoder = encoding.encoder(&vocab)?;
        let data = TrainData {
            pairs: &pairs,
            encoder: &encoder,
            valid: valid.as_deref(),
        };
        let mut progress = Progress::new(self, &vocab, encoding)?;
        train::pretrain(&data, &mut model, &self.cfg.training, &mut progress)?;
        self.save(&output, model, vocab, encoding)?;
        Ok(None)
    }

    pub fn finetune(&self) -> Result<Option<String>> {
        let output = self.cfg.require(&self.cfg.output, "output")?.to_owned();
        let train_path = self.cfg.require(&self.cfg.train, "train")?;
        let corpus = self.read(train_path)?;
        let (start, vocab, encoding) = self.starting_point(&corpus)?;
        let valid = match &self.cfg.valid {
            Some(path) => Some(self.groups(path, self.cfg.valid_group_size())?),
            None => None,
        };
        let encoder = encoding.encoder(&vocab)?;

        let model = if self.cfg.grid_search {
            let groups = valid
                .as_deref()
                .ok_or_else(|| Error::Usage("grid search needs --valid".into()))?;
            let mut runs: Vec<(f64, Model)> = Vec::new();
            let grid: GridResult = train::grid_search(&self.cfg.training.lr_grid, |lr| {
                let mut model = start.clone();
                let cfg = train::TrainConfig {
                    learning_rate: lr,
                    ..self.cfg.training.clone()
                };
                self.log(format!("grid: learning rate {lr:e}"));
                train::finetune(&mut model, &corpus, &encoder, &cfg, None, &mut train::Silent)?;
                let r1 = drs_core::eval::evaluate(&model.scorer(encoder.clone())?, groups)?.recall_at(1);
                self.log(format!("grid: learning rate {lr:e} -> valid R@1 {r1:.4}"));
                runs.push((lr, model));
                Ok(r1)
            })?;
            self.log(format!("grid: selected learning rate {:e}", grid.best_lr));
            if let Some(path) = &self.cfg.report {
                io::write_json(path, &GridArtifact { grid: &grid, provenance: self.provenance() })?;
            }
            runs.into_iter()
                .find(|(lr, _)| *lr == grid.best_lr)
                .map(|(_, m)| m)
                .expect("best run is recorded")
        } else {
            let mut model = start;
            let mut progress = Progress::new(self, &vocab, encoding)?;
            train::finetune(
                &mut model,
                &corpus,
                &encoder,
                &self.cfg.training,
                valid.as_deref(),
                &mut progress,
            )?;
            model
        };
        self.save(&output, model, vocab, encoding)?;
        Ok(None)
    }

    pub fn evaluate(&self) -> Result<Option<String>> {
        let ck_path = self.cfg.require(&self.cfg.checkpoint, "checkpoint")?;
        let test = self.cfg.require(&self.cfg.test, "test")?;
        let ck = Checkpoint::load(ck_path)?;
        let groups = self.groups(test, self.cfg.group_size)?;
        let scorer = ck.model.scorer(ck.encoding.encoder(&ck.vocab)?)?;
        let scores = score_groups(&scorer, &groups)?;
        let report = evaluate_scores(&groups, &scores).map_err(|e| Error::in_file(test, e))?;
        if let Some(path) = &self.cfg.scores {
            let mut tsv = String::from("group\tcandidate\tlabel\tscore\n");
            for (g, (group, s)) in groups.iter().zip(&scores).enumerate() {
                for (c, (cand, score)) in group.candidates.iter().zip(s).enumerate() {
                    tsv.push_str(&format!("{g}\t{c}\t{}\t{score:.17e}\n", u8::from(cand.label)));
                }
            }
            io::write_atomic(path, tsv.as_bytes())?;
            self.write_sidecar(path, EvalSummary { report: &report, model: &ck.model.provenance })?;
        }
        self.emit(self.artifact(EvalSummary {
            report: &report,
            model: &ck.model.provenance,
        }))
    }

    pub fn ngram(&self) -> Result<Option<String>> {
        let train = self.cfg.require(&self.cfg.train, "train")?;
        let test = self.cfg.require(&self.cfg.test, "test")?;
        let report = drs_core::analysis::overlap_report(
            &self.read(train)?,
            &self.read(test)?,
            self.cfg.n,
            &self.cfg.encoding().tokenizer(),
            self.cfg.ngram_mode,
        )?;
        self.emit(self.artifact(report))
    }

    /// Writes `train.tsv`, `valid.tsv` and `test.tsv` into the `--output` directory.
    pub fn synth(&self) -> Result<Option<String>> {
        let dir = self.cfg.require(&self.cfg.output, "output")?;
        let corpus = generate(&self.cfg.synth)?;
        for (name, rows) in [("train", &corpus.train), ("valid", &corpus.valid), ("test", &corpus.test)] {
            let path: PathBuf = dir.join(format!("{name}.tsv"));
            io::write_dialogues(&path, rows.iter())?;
            #[derive(Serialize)]
            struct Split<'a> {
                split: &'a str,
                rows: usize,
                key_of: &'a [usize],
            }
            self.write_sidecar(
                &path,
                Split {
                    split: name,
                    rows: rows.len(),
                    key_of: &corpus.key_of,
                },
            )?;
        }
        self.log(format!(
            "wrote {} train, {} valid and {} test rows to {}",
            corpus.train.len(),
            corpus.valid.len(),
            corpus.test.len(),
            dir.display()
        ));
        Ok(None)
    }
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    #[serde(flatten)]
    report: &'a MetricsReport,
    model: &'a drs_core::model::Provenance,
}

#[derive(Serialize)]
struct GridArtifact<'a> {
    grid: &'a GridResult,
    provenance: Provenance<'a>,
}

/// Logs epochs, writes scheduled checkpoints and keeps the JSONL report current.
struct Progress<'a> {
    job: &'a Job<'a>,
    vocab: &'a Vocabulary,
    encoding: Encoding,
    epoch_start: Instant,
    report: Option<(PathBuf, String)>,
}

impl<'a> Progress<'a> {
    fn new(job: &'a Job<'a>, vocab: &'a Vocabulary, encoding: Encoding) -> Result<Self> {
        let report = match &job.cfg.report {
            Some(path) => {
                let header = serde_json::to_string(&job.provenance()).expect("provenance serializes");
                let text = format!("{header}\n");
                io::write_atomic(path, text.as_bytes())?;
                Some((path.clone(), text))
            }
            None => None,
        };
        Ok(Self {
            job,
            vocab,
            encoding,
            epoch_start: Instant::now(),
            report,
        })
    }
}

impl TrainObserver for Progress<'_> {
    fn on_step(&mut self, _: &StepRecord) {}

    fn on_epoch_end(&mut self, model: &Model, record: &mut EpochRecord, checkpoint: bool) -> drs_core::Result<()> {
        record.wall_clock_secs = Some(self.epoch_start.elapsed().as_secs_f64());
        let observer_err = |e: Error| drs_core::Error::Observer(e.to_string());
        if checkpoint {
            if let Some(dir) = &self.job.cfg.checkpoint_dir {
                let path = dir.join(format!("epoch-{:03}.safetensors", record.epoch));
                Checkpoint {
                    model: model.clone(),
                    vocab: self.vocab.clone(),
                    encoding: self.encoding,
                    run: self.job.run_json(),
                }
                .save(&path)
                .map_err(observer_err)?;
                record.checkpoint = Some(path.display().to_string());
            }
        }
        let mut line = format!("epoch {} loss {:.4}", record.epoch, record.total_loss);
        if let Some(r1) = record.valid_r_at_1 {
            line.push_str(&format!(" valid R@1 {r1:.4}"));
        }
        self.job.log(line);
        if let Some((path, text)) = &mut self.report {
            text.push_str(&serde_json::to_string(record).expect("record serializes"));
            text.push('\n');
            io::write_atomic(path, text.as_bytes()).map_err(observer_err)?;
        }
        self.epoch_start = Instant::now();
        Ok(())
    }
}

/// Parses a JSONL report as written during training: a provenance header, then one record per
/// epoch.
pub fn read_report(path: &Path) -> Result<TrainReport> {
    let text = io::read_to_string(path)?;
    let epochs = text
        .lines()
        .skip(1)
        .map(serde_json::from_str)
        .collect::<Result<Vec<EpochRecord>, _>>()
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    Ok(TrainReport { epochs })
}
