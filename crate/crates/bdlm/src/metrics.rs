//! JSON-lines metrics log.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use bdlm_core::train::StepRecord;
use serde::Serialize;

/// One training step as written to the log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsLine<'a> {
    pub step: usize,
    pub phase: &'a str,
    pub block_size: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// `null` when timing is disabled.
    pub tokens_per_sec: Option<f64>,
    pub lr: f64,
    pub tokens: usize,
}

impl<'a> From<&'a StepRecord> for MetricsLine<'a> {
    fn from(r: &'a StepRecord) -> Self {
        MetricsLine {
            step: r.step,
            phase: &r.phase,
            block_size: r.block_size,
            loss: r.loss,
            grad_norm: r.grad_norm,
            tokens_per_sec: r.tokens_per_sec,
            lr: r.lr,
            tokens: r.tokens,
        }
    }
}

pub fn to_json_line(record: &StepRecord) -> String {
    serde_json::to_string(&MetricsLine::from(record)).expect("metrics serialize")
}

/// Appends step records to a file, one JSON object per line.
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
    /// Every record of this run, kept for in-process inspection.
    pub records: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsLog {
            out: Some(BufWriter::new(f)),
            records: Vec::new(),
        })
    }

    /// Keeps records in memory only.
    pub fn memory() -> Self {
        MetricsLog {
            out: None,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: &StepRecord) -> std::io::Result<()> {
        if let Some(out) = &mut self.out {
            writeln!(out, "{}", to_json_line(record))?;
        }
        self.records.push(record.clone());
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        match &mut self.out {
            Some(o) => o.flush(),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_has_the_expected_keys() {
        let r = StepRecord {
            step: 3,
            phase: "stable".into(),
            block_size: 64,
            loss: 1.5,
            masked_count: 10,
            grad_norm: 0.5,
            raw_grad_norm: 0.5,
            lr: 1e-3,
            tokens: 100,
            tokens_per_sec: None,
            extras: vec![],
        };
        let v: serde_json::Value = serde_json::from_str(&to_json_line(&r)).unwrap();
        for k in ["step", "phase", "block_size", "loss", "grad_norm", "tokens_per_sec"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(v["tokens_per_sec"].is_null());
        assert_eq!(v["phase"], "stable");
    }
}
