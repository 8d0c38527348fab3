//! Dataset readers and writers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One labeled sentence: parallel words and tags.
pub type TaggedSentence = (Vec<String>, Vec<String>);

/// CoNLL-style columns: first column is the token, last column the label,
/// blank lines end sentences, `-DOCSTART-` lines are skipped.
pub fn load_conll(path: &Path) -> Result<Vec<TaggedSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, path)
}

pub fn parse_conll(text: &str, path: &Path) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    let (mut words, mut tags) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            if !words.is_empty() {
                out.push((std::mem::take(&mut words), std::mem::take(&mut tags)));
            }
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected token and label columns, got {line:?}"),
            });
        }
        words.push(cols[0].to_string());
        tags.push(cols[cols.len() - 1].to_string());
    }
    if !words.is_empty() {
        out.push((words, tags));
    }
    Ok(out)
}

pub fn write_conll(path: &Path, data: &[TaggedSentence]) -> Result<()> {
    let mut text = String::new();
    for (words, tags) in data {
        for (w, t) in words.iter().zip(tags) {
            text.push_str(w);
            text.push(' ');
            text.push_str(t);
            text.push('\n');
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `label<TAB>text` per line; blank lines ignored.
pub fn load_classification(path: &Path) -> Result<Vec<(Vec<String>, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected label<TAB>text".into()))?;
        let words: Vec<String> = body.split_whitespace().map(String::from).collect();
        if label.trim().is_empty() || words.is_empty() {
            return Err(parse_err("empty label or text".into()));
        }
        out.push((words, label.trim().to_string()));
    }
    Ok(out)
}

pub fn write_classification(path: &Path, data: &[(Vec<String>, String)]) -> Result<()> {
    let text: String = data.iter().map(|(w, l)| format!("{l}\t{}\n", w.join(" "))).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Plain text, one sentence per line, whitespace-separated; blank lines
/// ignored.
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_corpus(&text))
}

pub fn parse_corpus(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|w| !w.is_empty())
        .collect()
}
