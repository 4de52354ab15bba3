//! Dialogue datasets in the label-first TSV layout used by the Ubuntu, Douban and E-commerce
//! response selection benchmarks:
//!
//! ```text
//! label<TAB>utterance_1<TAB>...<TAB>utterance_T<TAB>response
//! ```

mod vocab;

pub use vocab::{Special, Tokenizer, Vocabulary, SPECIAL_TOKENS};

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One context/response pair with its relevance label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub turns: Vec<String>,
    pub response: String,
    pub label: bool,
}

impl Dialogue {
    pub fn new(turns: Vec<String>, response: impl Into<String>, label: bool) -> Self {
        Self {
            turns,
            response: response.into(),
            label,
        }
    }

    /// Renders the dialogue as one TSV line, without the trailing newline.
    pub fn to_tsv(&self) -> String {
        let mut line = String::from(if self.label { "1" } else { "0" });
        for utterance in self.turns.iter().chain(core::iter::once(&self.response)) {
            line.push('\t');
            line.push_str(utterance);
        }
        line
    }
}

/// Collapses inner whitespace runs to a single space and trims both ends.
pub fn normalize_utterance(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Parses a single TSV line.
pub fn parse_line(line: &str) -> core::result::Result<Dialogue, String> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(format!("expected at least 3 fields, found {}", fields.len()));
    }
    let label = match fields[0].trim() {
        "1" => true,
        "0" => false,
        other => return Err(format!("label must be 0 or 1, found {other:?}")),
    };
    let mut utterances = Vec::with_capacity(fields.len() - 1);
    for (i, raw) in fields[1..].iter().enumerate() {
        let utterance = normalize_utterance(raw);
        if utterance.is_empty() {
            return Err(format!("field {} is empty", i + 2));
        }
        utterances.push(utterance);
    }
    let response = utterances.pop().expect("at least two utterances");
    Ok(Dialogue {
        turns: utterances,
        response,
        label,
    })
}

/// Result of [`parse_tsv`]: the parsed dialogues and the 1-based numbers of skipped lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parsed {
    pub dialogues: Vec<Dialogue>,
    pub skipped: Vec<usize>,
}

/// Parses TSV lines. In strict mode the first malformed line aborts; otherwise malformed lines
/// are skipped and reported in [`Parsed::skipped`].
pub fn parse_tsv<'a, I>(lines: I, strict: bool) -> Result<Parsed>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut parsed = Parsed::default();
    for (idx, line) in lines.into_iter().enumerate() {
        match parse_line(line) {
            Ok(d) => parsed.dialogues.push(d),
            Err(reason) if strict => {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    reason,
                })
            }
            Err(_) => parsed.skipped.push(idx + 1),
        }
    }
    Ok(parsed)
}

/// A response candidate inside a [`CandidateGroup`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub response: String,
    pub label: bool,
}

/// One context and its candidate responses, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub context: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl CandidateGroup {
    pub fn labels(&self) -> Vec<bool> {
        self.candidates.iter().map(|c| c.label).collect()
    }

    pub fn relevant_count(&self) -> usize {
        self.candidates.iter().filter(|c| c.label).count()
    }

    /// Back to one dialogue per candidate.
    pub fn to_dialogues(&self) -> impl Iterator<Item = Dialogue> + '_ {
        self.candidates
            .iter()
            .map(|c| Dialogue::new(self.context.clone(), c.response.clone(), c.label))
    }
}

/// Splits consecutive rows into groups of `group_size` candidates sharing one context.
pub fn group_candidates(pairs: &[Dialogue], group_size: usize) -> Result<Vec<CandidateGroup>> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group_size must be positive".to_string()));
    }
    if !pairs.len().is_multiple_of(group_size) {
        return Err(Error::GroupSize {
            rows: pairs.len(),
            group_size,
        });
    }
    pairs
        .chunks(group_size)
        .enumerate()
        .map(|(block, rows)| {
            let context = &rows[0].turns;
            if let Some(row) = rows.iter().position(|d| &d.turns != context) {
                return Err(Error::ContextMismatch { block, row });
            }
            Ok(CandidateGroup {
                context: context.clone(),
                candidates: rows
                    .iter()
                    .map(|d| Candidate {
                        response: d.response.clone(),
                        label: d.label,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Summary counts of a split, as in a dataset statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pair_count: usize,
    pub positive_count: usize,
    pub negative_count: usize,
    pub avg_turns: f64,
    pub distinct_response_count: usize,
}

pub fn compute_stats(pairs: &[Dialogue]) -> Result<CorpusStats> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus has no pairs"));
    }
    let positive_count = pairs.iter().filter(|d| d.label).count();
    let total_turns: usize = pairs.iter().map(|d| d.turns.len()).sum();
    let responses: BTreeSet<&str> = pairs.iter().map(|d| d.response.as_str()).collect();
    Ok(CorpusStats {
        pair_count: pairs.len(),
        positive_count,
        negative_count: pairs.len() - positive_count,
        avg_turns: total_turns as f64 / pairs.len() as f64,
        distinct_response_count: responses.len(),
    })
}
