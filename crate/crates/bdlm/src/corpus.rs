//! Reading corpora from disk.

use std::fmt;
use std::fs;
use std::path::Path;

use bdlm_core::packing::PairExample;
use bdlm_core::vocab::{encode, Token};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} is not valid UTF-8 (byte offset {offset})")]
    Encoding { path: String, offset: usize },
}

/// Which fields a pair file must provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// `prompt` and `response`.
    Sft,
    /// `prompt`, `chosen` and `rejected`.
    Preference,
}

/// A problem with one input line, which was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairFile {
    pub pairs: Vec<PairExample>,
    pub diagnostics: Vec<Diagnostic>,
    /// Set when the file held no records at all.
    pub warning: Option<String>,
}

fn read_text(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|e| CorpusError::Encoding {
        path: path.display().to_string(),
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Splits text into documents at blank lines; each document keeps its
/// internal newlines and loses surrounding whitespace-only lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

/// Byte-tokenized documents of a blank-line separated UTF-8 corpus.
pub fn load_documents(path: &Path) -> Result<Vec<Vec<Token>>, CorpusError> {
    Ok(split_documents(&read_text(path)?)
        .iter()
        .map(|d| encode(d.as_bytes()))
        .collect())
}

pub fn write_documents(path: &Path, docs: &[String]) -> std::io::Result<()> {
    fs::write(path, docs.join("\n\n") + "\n")
}

#[derive(Deserialize)]
struct RawPair {
    prompt: Option<String>,
    response: Option<String>,
    chosen: Option<String>,
    rejected: Option<String>,
}

/// Parses JSON-lines pair records. Malformed records are skipped and
/// reported; blank lines are ignored.
pub fn parse_pairs(text: &str, mode: PairMode) -> PairFile {
    let mut out = PairFile::default();
    let mut records = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records += 1;
        let mut skip = |message: String| {
            out.diagnostics.push(Diagnostic { line: i + 1, message });
        };
        let raw: RawPair = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                skip(format!("malformed JSON: {e}"));
                continue;
            }
        };
        let Some(prompt) = raw.prompt else {
            skip("missing field \"prompt\"".into());
            continue;
        };
        let (response, rejected) = match mode {
            PairMode::Sft => match raw.response.or(raw.chosen) {
                Some(r) => (r, None),
                None => {
                    skip("missing field \"response\"".into());
                    continue;
                }
            },
            PairMode::Preference => match (raw.chosen.or(raw.response), raw.rejected) {
                (Some(c), Some(r)) => (c, Some(r)),
                (None, _) => {
                    skip("missing field \"chosen\"".into());
                    continue;
                }
                (_, None) => {
                    skip("missing field \"rejected\"".into());
                    continue;
                }
            },
        };
        if prompt.is_empty() {
            skip("empty prompt".into());
            continue;
        }
        match PairExample::from_text(&prompt, &response, rejected.as_deref()) {
            Ok(p) => out.pairs.push(p),
            Err(e) => skip(e.to_string()),
        }
    }
    if records == 0 {
        out.warning = Some("no records found".into());
    }
    out
}

pub fn load_pairs(path: &Path, mode: PairMode) -> Result<PairFile, CorpusError> {
    Ok(parse_pairs(&read_text(path)?, mode))
}

/// One JSON object per line.
pub fn write_pairs(path: &Path, rows: &[(String, String, Option<String>)]) -> std::io::Result<()> {
    let mut text = String::new();
    for (prompt, response, rejected) in rows {
        let v = match rejected {
            None => serde_json::json!({ "prompt": prompt, "response": response }),
            Some(r) => serde_json::json!({ "prompt": prompt, "chosen": response, "rejected": r }),
        };
        text.push_str(&v.to_string());
        text.push('\n');
    }
    fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bdlm_core::vocab::EOS;

    #[test]
    fn blank_lines_separate_documents() {
        let docs = split_documents("one\ntwo\n\n\nthree\n  \nfour");
        assert_eq!(docs, ["one\ntwo", "three", "four"]);
        assert!(split_documents("\n\n").is_empty());
    }

    #[test]
    fn sft_record() {
        let f = parse_pairs(r#"{"prompt":"2+2=","response":"4"}"#, PairMode::Sft);
        assert!(f.diagnostics.is_empty());
        assert_eq!(f.pairs[0].prompt.len(), 4);
        assert_eq!(f.pairs[0].response, [b'4' as usize, EOS]);
    }

    #[test]
    fn empty_file_warns() {
        let f = parse_pairs("", PairMode::Sft);
        assert!(f.pairs.is_empty());
        assert!(f.warning.is_some());
    }

    #[test]
    fn missing_rejected_is_skipped_with_line() {
        let text = "{\"prompt\":\"a\",\"chosen\":\"b\",\"rejected\":\"c\"}\n{\"prompt\":\"a\",\"chosen\":\"b\"}\nnot json\n";
        let f = parse_pairs(text, PairMode::Preference);
        assert_eq!(f.pairs.len(), 1);
        assert_eq!(f.diagnostics.len(), 2);
        assert_eq!(f.diagnostics[0].line, 2);
        assert!(f.diagnostics[0].message.contains("rejected"));
        assert_eq!(f.diagnostics[1].line, 3);
    }
}
