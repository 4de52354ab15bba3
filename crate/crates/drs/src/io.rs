//! Corpus, vocabulary and JSON files on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use drs_core::corpus::{parse_tsv, Dialogue, Parsed, Vocabulary};
use serde::Serialize;

use crate::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_dialogues(path: &Path, strict: bool) -> Result<Parsed> {
    let text = read_to_string(path)?;
    parse_tsv(text.lines(), strict).map_err(|e| Error::in_file(path, e))
}

pub fn dialogues_to_tsv<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue>) -> String {
    let mut out = String::new();
    for d in dialogues {
        out.push_str(&d.to_tsv());
        out.push('\n');
    }
    out
}

pub fn write_dialogues<'a>(path: &Path, dialogues: impl IntoIterator<Item = &'a Dialogue>) -> Result<()> {
    write_atomic(path, dialogues_to_tsv(dialogues).as_bytes())
}

/// One token per line, in id order.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = read_to_string(path)?;
    let tokens = text.lines().map(str::to_owned).collect();
    Vocabulary::from_tokens(tokens).map_err(|e| Error::in_file(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value).as_bytes())
}
