//! Synthetic deterministic-grammar corpus: `a^n:b^n` lines and two-digit
//! addition lines. Every completion is a function of its prompt, so exact
//! match is a meaningful score without a reference model.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use bdlm_core::packing::PairExample;
use bdlm_core::rng::{derive_seed, rng};
use bdlm_core::vocab::{encode, EOS};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{write_documents, write_pairs};

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarSpec {
    pub seed: u64,
    /// Approximate number of supervised pretraining tokens to emit.
    pub pretrain_tokens: usize,
    /// Upper bound on the bytes of one pretraining document.
    pub doc_bytes: usize,
    /// Fraction of addition problems withheld from all training data.
    pub heldout_fraction: f64,
    /// Longest `a` run in the copy task.
    pub max_run: usize,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec {
            seed: 0,
            pretrain_tokens: 100_000,
            doc_bytes: 60,
            heldout_fraction: 0.1,
            max_run: 16,
        }
    }
}

/// One prompt with its unique correct completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub prompt: String,
    pub answer: String,
}

impl Problem {
    fn addition(x: u32, y: u32) -> Self {
        Problem {
            prompt: format!("{x}+{y}="),
            answer: (x + y).to_string(),
        }
    }

    fn run(n: usize) -> Self {
        Problem {
            prompt: format!("{}:", "a".repeat(n)),
            answer: "b".repeat(n),
        }
    }

    pub fn line(&self) -> String {
        format!("{}{}", self.prompt, self.answer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarCorpus {
    /// Newline-joined lines, each document at most `doc_bytes` long.
    pub docs: Vec<String>,
    /// Problems used for pretraining lines and supervised pairs.
    pub train: Vec<Problem>,
    /// Addition problems that never appear in `docs` or `train`.
    pub heldout: Vec<Problem>,
}

impl GrammarCorpus {
    pub fn generate(spec: &GrammarSpec) -> Self {
        let mut r = rng(derive_seed(spec.seed, 0x6772_616d, 0));
        let mut additions: Vec<(u32, u32)> = (10..100).flat_map(|x| (10..100).map(move |y| (x, y))).collect();
        additions.shuffle(&mut r);
        let n_held = (additions.len() as f64 * spec.heldout_fraction).round() as usize;
        let heldout: Vec<Problem> = additions[..n_held].iter().map(|&(x, y)| Problem::addition(x, y)).collect();
        let mut train: Vec<Problem> = additions[n_held..].iter().map(|&(x, y)| Problem::addition(x, y)).collect();
        train.extend((1..=spec.max_run).map(Problem::run));

        let mut docs = Vec::new();
        let mut emitted = 0usize;
        let mut doc = String::new();
        while emitted < spec.pretrain_tokens {
            // one run line for every eight additions keeps the mix balanced
            let p = if r.random_range(0..9) == 0 {
                Problem::run(r.random_range(1..=spec.max_run))
            } else {
                let (x, y) = additions[n_held + r.random_range(0..additions.len() - n_held)];
                Problem::addition(x, y)
            };
            let line = p.line();
            if !doc.is_empty() && doc.len() + 1 + line.len() > spec.doc_bytes {
                emitted += doc.len();
                docs.push(core::mem::take(&mut doc));
            }
            if !doc.is_empty() {
                doc.push('\n');
            }
            doc.push_str(&line);
        }
        if !doc.is_empty() {
            docs.push(doc);
        }
        GrammarCorpus { docs, train, heldout }
    }

    /// Supervised pairs over the training problems.
    pub fn sft_pairs(&self, eos_fill: usize) -> Vec<PairExample> {
        self.train.iter().map(|p| pair(p, None, eos_fill)).collect()
    }

    /// Preference pairs: the correct answer against a near miss.
    pub fn preference_pairs(&self, seed: u64, eos_fill: usize) -> Vec<PairExample> {
        self.train
            .iter()
            .zip(self.near_misses(seed))
            .map(|(p, wrong)| pair(p, Some(&wrong), eos_fill))
            .collect()
    }

    fn near_misses(&self, seed: u64) -> Vec<String> {
        let mut r = rng(derive_seed(seed, 0x7072_6566, 0));
        self.train.iter().map(|p| near_miss(&p.answer, &mut r)).collect()
    }

    /// Writes `corpus.txt`, `sft.jsonl`, `prefs.jsonl` and `eval.jsonl`
    /// (the held-out problems) into `dir`.
    pub fn write_files(&self, dir: &Path, seed: u64) -> io::Result<GrammarFiles> {
        fs::create_dir_all(dir)?;
        let files = GrammarFiles {
            corpus: dir.join("corpus.txt"),
            sft: dir.join("sft.jsonl"),
            prefs: dir.join("prefs.jsonl"),
            eval: dir.join("eval.jsonl"),
        };
        let rows = |ps: &[Problem]| -> Vec<(String, String, Option<String>)> {
            ps.iter().map(|p| (p.prompt.clone(), p.answer.clone(), None)).collect()
        };
        write_documents(&files.corpus, &self.docs)?;
        write_pairs(&files.sft, &rows(&self.train))?;
        write_pairs(&files.eval, &rows(&self.heldout))?;
        let prefs: Vec<_> = self
            .train
            .iter()
            .zip(self.near_misses(seed))
            .map(|(p, w)| (p.prompt.clone(), p.answer.clone(), Some(w)))
            .collect();
        write_pairs(&files.prefs, &prefs)?;
        Ok(files)
    }
}

/// Paths written by [`GrammarCorpus::write_files`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarFiles {
    pub corpus: PathBuf,
    pub sft: PathBuf,
    pub prefs: PathBuf,
    pub eval: PathBuf,
}

/// Response tokens: the answer, one EOS, then more EOS up to a multiple of
/// `eos_fill` (no extra fill when `eos_fill` is 0 or 1).
pub fn response_tokens(answer: &str, eos_fill: usize) -> Vec<usize> {
    let mut t = encode(answer.as_bytes());
    t.push(EOS);
    if eos_fill > 1 {
        let target = t.len().div_ceil(eos_fill) * eos_fill;
        t.resize(target, EOS);
    }
    t
}

fn pair(p: &Problem, rejected: Option<&str>, eos_fill: usize) -> PairExample {
    PairExample {
        prompt: encode(p.prompt.as_bytes()),
        response: response_tokens(&p.answer, eos_fill),
        rejected: rejected.map(|w| response_tokens(w, eos_fill)),
    }
}

fn near_miss(answer: &str, r: &mut impl Rng) -> String {
    if let Ok(v) = answer.parse::<i64>() {
        let delta = [1i64, -1, 10, -10][r.random_range(0..4)];
        let w = if v + delta < 0 { v + 1 } else { v + delta };
        w.to_string()
    } else if answer.len() > 1 && r.random_bool(0.5) {
        answer[1..].to_string()
    } else {
        format!("{answer}b")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn heldout_never_leaks() {
        let c = GrammarCorpus::generate(&GrammarSpec {
            pretrain_tokens: 20_000,
            ..GrammarSpec::default()
        });
        let held: HashSet<String> = c.heldout.iter().map(Problem::line).collect();
        assert_eq!(held.len(), 810);
        for d in &c.docs {
            assert!(d.len() <= 60);
            for l in d.lines() {
                assert!(!held.contains(l), "{l}");
            }
        }
        assert!(c.train.iter().all(|p| !held.contains(&p.line())));
        let total: usize = c.docs.iter().map(String::len).sum();
        assert!((20_000..20_100).contains(&total));
    }

    #[test]
    fn eos_fill_rounds_up() {
        assert_eq!(response_tokens("42", 0).len(), 3);
        assert_eq!(response_tokens("42", 32).len(), 32);
        assert_eq!(response_tokens(&"b".repeat(32), 32).len(), 64);
        assert_eq!(*response_tokens("42", 32).last().unwrap(), EOS);
    }

    #[test]
    fn near_misses_differ() {
        let c = GrammarCorpus::generate(&GrammarSpec {
            pretrain_tokens: 10,
            ..GrammarSpec::default()
        });
        for p in c.preference_pairs(3, 0) {
            assert_ne!(p.response, p.rejected.unwrap());
        }
    }
}
