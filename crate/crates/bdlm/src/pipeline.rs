//! Training stages and evaluation on top of the core trainer.
//!
//! Each stage loads its input checkpoint, trains, and writes its output
//! checkpoint plus metrics lines into the run directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bdlm_core::decode::{forward_decode, generate, DecodeConfig, DecodeState};
use bdlm_core::model::DenoiserParams;
use bdlm_core::packing::{pack_documents, PairExample, PackedBatch};
use bdlm_core::schedule::{merge_checkpoints, select_top_k, BlockSchedule, CheckpointMeta, Phase, PhaseKind};
use bdlm_core::train::{evaluate_elbo, Objective, PhasePlan, PhaseSummary, StepRecord, TrainData, Trainer};
use bdlm_core::vocab::{decode, Token, EOS};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointInfo};
use crate::config::RunConfig;
use crate::corpus::{self, CorpusError, PairMode};
use crate::metrics::MetricsLog;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] bdlm_core::error::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Losses seen within a phase and the divergence verdict derived from them.
///
/// The starting loss is the mean of the first `window` losses; the phase
/// diverges when a trailing mean over `window` steps exceeds `limit` times
/// that start.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceCheck {
    pub window: usize,
    pub limit: f64,
    pub start_loss: f64,
    pub max_smoothed_loss: f64,
    pub ratio: f64,
    pub diverged: bool,
}

impl DivergenceCheck {
    pub fn from_losses(losses: &[f64], window: usize, limit: f64) -> Option<Self> {
        if losses.is_empty() || window == 0 {
            return None;
        }
        let w = window.min(losses.len());
        let start = losses[..w].iter().sum::<f64>() / w as f64;
        let max_smoothed = losses
            .windows(w)
            .map(|s| s.iter().sum::<f64>() / w as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let ratio = max_smoothed / start;
        Some(DivergenceCheck {
            window: w,
            limit,
            start_loss: start,
            max_smoothed_loss: max_smoothed,
            ratio,
            diverged: !(ratio <= limit),
        })
    }
}

/// One trained phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub name: String,
    pub objective: &'static str,
    pub block_size: usize,
    pub steps: usize,
    pub tokens: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub max_loss: Option<f64>,
    pub final_lr: f64,
    pub divergence: Option<DivergenceCheck>,
    pub validation_elbo: Option<f64>,
    pub checkpoint: String,
    pub seconds: Option<f64>,
}

/// Result of a stage: its phases and the checkpoint it leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub phases: Vec<PhaseReport>,
    pub checkpoint: String,
}

impl StageReport {
    pub fn diverged(&self) -> bool {
        self.phases.iter().any(|p| p.divergence.as_ref().is_some_and(|d| d.diverged))
    }
}

/// A run directory with its configuration and metrics log.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub log: MetricsLog,
    started: Instant,
}

impl Run {
    /// Opens (creating if needed) the run directory, appends to its metrics
    /// log and writes the effective configuration next to it.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        let dir = PathBuf::from(&cfg.out_dir);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let cfg_path = dir.join("effective.conf");
        fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;
        let log_path = dir.join("metrics.jsonl");
        let log = MetricsLog::create(&log_path).map_err(io_err(&log_path))?;
        Ok(Run {
            cfg,
            dir,
            log,
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Runs one phase, logging every step, and saves its checkpoint.
    fn phase(
        &mut self,
        trainer: &mut Trainer<f32>,
        plan: &PhasePlan,
        data: TrainData<'_>,
        ckpt_name: &str,
    ) -> Result<(PhaseSummary, PhaseReport)> {
        let t0 = Instant::now();
        let mut losses = Vec::new();
        let mut io_failure = None;
        let summary = {
            let on = self.cfg.timing;
            let started = self.started;
            let mut clock = move || on.then(|| started.elapsed().as_secs_f64());
            let log = &mut self.log;
            let mut sink = |r: &StepRecord| {
                losses.push(r.loss);
                if let Err(e) = log.push(r) {
                    io_failure.get_or_insert(e);
                }
            };
            trainer.run_phase(plan, data, &mut clock, &mut sink)?
        };
        let log_path = self.path("metrics.jsonl");
        if let Some(e) = io_failure {
            return Err(io_err(&log_path)(e));
        }
        self.log.flush().map_err(io_err(&log_path))?;
        let report = PhaseReport {
            name: plan.name.clone(),
            objective: plan.objective.name(),
            block_size: plan.block_size,
            steps: summary.steps,
            tokens: summary.tokens,
            first_loss: summary.first_loss,
            last_loss: summary.last_loss,
            max_loss: summary.max_loss,
            final_lr: summary.final_lr,
            divergence: DivergenceCheck::from_losses(&losses, 10, 3.0),
            validation_elbo: None,
            checkpoint: ckpt_name.to_string(),
            seconds: self.cfg.timing.then(|| t0.elapsed().as_secs_f64()),
        };
        Ok((summary, report))
    }

    fn save(&self, trainer: &Trainer<f32>, name: &str, phase: &str, block_size: usize, elbo: Option<f64>) -> Result<PathBuf> {
        let path = self.path(name);
        let info = CheckpointInfo {
            step: trainer.step,
            phase: phase.to_string(),
            block_size,
            validation_elbo: elbo,
            lr: trainer.last_lr,
        };
        Checkpoint::new(trainer.params.clone(), info).save(&path)?;
        Ok(path)
    }

    fn trainer_from(&self, ckpt: &Checkpoint) -> Result<Trainer<f32>> {
        if *ckpt.params.config() != self.cfg.model {
            return Err(PipelineError::Data(format!(
                "checkpoint model {:?} differs from the configured model {:?}",
                ckpt.params.config(),
                self.cfg.model
            )));
        }
        let mut t = Trainer::new(ckpt.params.clone(), self.cfg.train_config())?;
        t.step = ckpt.info.step;
        Ok(t)
    }

    fn pair_rows(&self, trainer: &mut Trainer<f32>) {
        if self.cfg.sft_seq_len > 0 {
            trainer.config.seq_len = self.cfg.sft_seq_len;
        }
    }

    fn write_report(&self, report: &StageReport) -> Result<()> {
        let path = self.path(&format!("{}.report.json", report.stage));
        let text = serde_json::to_string_pretty(report).expect("report serializes");
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Auto-regressive pretraining from a fresh initialization.
    pub fn pretrain(&mut self, docs: &[Vec<Token>]) -> Result<StageReport> {
        let params = DenoiserParams::<f32>::init(self.cfg.model, self.cfg.train.seed)?;
        let mut trainer = Trainer::new(params, self.cfg.train_config())?;
        let plan = PhasePlan {
            name: "pretrain".into(),
            objective: Objective::Ar,
            block_size: 1,
            token_budget: self.cfg.budget.pretrain_tokens,
            constant_lr: None,
        };
        let (_, report) = self.phase(&mut trainer, &plan, TrainData::Docs(docs), "pretrain.ckpt")?;
        self.save(&trainer, "pretrain.ckpt", "pretrain", 1, None)?;
        let stage = StageReport {
            stage: "pretrain".into(),
            phases: vec![report],
            checkpoint: "pretrain.ckpt".into(),
        };
        self.write_report(&stage)?;
        Ok(stage)
    }

    /// The block-size phases of the conversion stage.
    pub fn conversion_phases(&self) -> Result<Vec<Phase>> {
        let l = self.cfg.train.seq_len;
        let total = self.cfg.budget.convert_tokens;
        let mut phases = BlockSchedule::default_wsd(l, self.cfg.final_block_size, total)?.phases;
        if self.cfg.skip_warmup {
            let warm: usize = phases.iter().filter(|p| p.kind == PhaseKind::Warmup).map(|p| p.token_budget).sum();
            phases.retain(|p| p.kind != PhaseKind::Warmup);
            if let Some(first) = phases.first_mut() {
                first.token_budget += warm;
            }
        }
        Ok(phases)
    }

    /// Converts an auto-regressive checkpoint into a block-diffusion model
    /// along the block-size schedule, evaluating and saving after each phase.
    /// `valid` documents are scored at the final block size.
    pub fn convert(&mut self, start: &Checkpoint, docs: &[Vec<Token>], valid: &[Vec<Token>]) -> Result<StageReport> {
        let mut trainer = self.trainer_from(start)?;
        trainer.config.lr *= self.cfg.convert_lr_scale;
        let valid_batch = if valid.is_empty() {
            None
        } else {
            Some(pack_documents(valid, self.cfg.train.seq_len, self.cfg.final_block_size)?)
        };
        let mut counts: HashMap<&'static str, usize> = HashMap::new();
        let mut phases = Vec::new();
        let mut last = String::new();
        for phase in self.conversion_phases()? {
            let c = counts.entry(phase.kind.name()).or_insert(0);
            let label = phase.label(*c);
            *c += 1;
            let name = format!("convert-{label}.ckpt");
            let plan = PhasePlan {
                name: label.clone(),
                objective: Objective::Bdlm,
                block_size: phase.block_size,
                token_budget: phase.token_budget,
                constant_lr: None,
            };
            let (_, mut report) = self.phase(&mut trainer, &plan, TrainData::Docs(docs), &name)?;
            report.validation_elbo = match &valid_batch {
                Some(b) => Some(self.validation_elbo(&trainer.params, b)?),
                None => None,
            };
            self.save(&trainer, &name, &label, phase.block_size, report.validation_elbo)?;
            phases.push(report);
            last = name;
        }
        let stage = StageReport {
            stage: "convert".into(),
            phases,
            checkpoint: last,
        };
        self.write_report(&stage)?;
        Ok(stage)
    }

    fn validation_elbo(&self, params: &DenoiserParams<f32>, batch: &PackedBatch) -> Result<f64> {
        let seed = bdlm_core::rng::derive_seed(self.cfg.train.seed, 0x76616c, 0);
        Ok(evaluate_elbo(params, batch, &self.cfg.train.noise, self.cfg.elbo_samples, seed)?)
    }

    /// Supervised fine-tuning, with the confidence-aware term when `sft.cap`.
    pub fn sft(&mut self, start: &Checkpoint, pairs: &[PairExample]) -> Result<StageReport> {
        let mut trainer = self.trainer_from(start)?;
        trainer.config.lr *= self.cfg.sft_lr_scale;
        self.pair_rows(&mut trainer);
        let pairs = fill_eos(pairs, self.cfg.eos_fill);
        let cap = self.cfg.sft_cap;
        let stage_name = if cap { "cap" } else { "sft" };
        let name = format!("{stage_name}.ckpt");
        let plan = PhasePlan {
            name: stage_name.into(),
            objective: Objective::Sft { cap },
            block_size: self.cfg.final_block_size,
            token_budget: self.cfg.budget.sft_tokens,
            constant_lr: None,
        };
        let (_, report) = self.phase(&mut trainer, &plan, TrainData::Pairs(&pairs), &name)?;
        self.save(&trainer, &name, stage_name, self.cfg.final_block_size, None)?;
        let stage = StageReport {
            stage: stage_name.into(),
            phases: vec![report],
            checkpoint: name,
        };
        self.write_report(&stage)?;
        Ok(stage)
    }

    /// Preference optimization against a frozen copy of `start`, at the
    /// constant learning rate that ended fine-tuning.
    pub fn dpo(&mut self, start: &Checkpoint, pairs: &[PairExample]) -> Result<StageReport> {
        if pairs.iter().any(|p| p.rejected.is_none()) {
            return Err(PipelineError::Data("preference data needs a rejected response on every line".into()));
        }
        let mut trainer = self.trainer_from(start)?;
        self.pair_rows(&mut trainer);
        let pairs = fill_eos(pairs, self.cfg.eos_fill);
        let lr = start
            .info
            .lr
            .unwrap_or(self.cfg.train.lr * self.cfg.sft_lr_scale * self.cfg.train.min_lr_ratio);
        let plan = PhasePlan {
            name: "dpo".into(),
            objective: Objective::Dpo,
            block_size: self.cfg.final_block_size,
            token_budget: self.cfg.budget.dpo_tokens,
            constant_lr: Some(lr),
        };
        let (_, report) = self.phase(&mut trainer, &plan, TrainData::Pairs(&pairs), "dpo.ckpt")?;
        self.save(&trainer, "dpo.ckpt", "dpo", self.cfg.final_block_size, None)?;
        let stage = StageReport {
            stage: "dpo".into(),
            phases: vec![report],
            checkpoint: "dpo.ckpt".into(),
        };
        self.write_report(&stage)?;
        Ok(stage)
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }
}

/// Pads every response (and rejected response) with EOS to a multiple of
/// `fill`; no change when `fill <= 1`.
pub fn fill_eos(pairs: &[PairExample], fill: usize) -> Vec<PairExample> {
    let pad = |t: &Vec<Token>| {
        let mut t = t.clone();
        if fill > 1 {
            t.resize(t.len().div_ceil(fill) * fill, EOS);
        }
        t
    };
    pairs
        .iter()
        .map(|p| PairExample {
            prompt: p.prompt.clone(),
            response: pad(&p.response),
            rejected: p.rejected.as_ref().map(pad),
        })
        .collect()
}

/// Splits documents into training and validation sets: the last
/// `ceil(fraction * n)` documents validate, at least one stays for training.
pub fn split_validation(docs: Vec<Vec<Token>>, fraction: f64) -> (Vec<Vec<Token>>, Vec<Vec<Token>>) {
    let n = docs.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let mut train = docs;
    let valid = train.split_off(n - k);
    (train, valid)
}

/// Loads the documents named by `data.corpus`.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<Vec<Token>>> {
    if cfg.corpus.is_empty() {
        return Err(PipelineError::Data("data.corpus is not set".into()));
    }
    let docs = corpus::load_documents(Path::new(&cfg.corpus))?;
    if docs.is_empty() {
        return Err(PipelineError::Data(format!("{} holds no documents", cfg.corpus)));
    }
    Ok(docs)
}

/// Loads pairs from `path`, failing on any malformed line.
pub fn load_pairs(path: &str, key: &str, mode: PairMode) -> Result<Vec<PairExample>> {
    if path.is_empty() {
        return Err(PipelineError::Data(format!("{key} is not set")));
    }
    let file = corpus::load_pairs(Path::new(path), mode)?;
    if let Some(d) = file.diagnostics.first() {
        return Err(PipelineError::Data(format!("{path}: {d} ({} malformed lines)", file.diagnostics.len())));
    }
    if file.pairs.is_empty() {
        return Err(PipelineError::Data(format!("{path} holds no pairs")));
    }
    Ok(file.pairs)
}

/// Selects the `k` best checkpoints by validation score and averages them.
pub fn merge_files(paths: &[PathBuf], k: usize) -> Result<(Checkpoint, Vec<String>)> {
    let mut loaded = Vec::new();
    let mut metas = Vec::new();
    for p in paths {
        let c = Checkpoint::load(p)?;
        let score = c.info.validation_elbo.ok_or_else(|| PipelineError::Data(format!("{} has no validation score", p.display())))?;
        metas.push(CheckpointMeta {
            path: p.display().to_string(),
            step: c.info.step,
            validation_elbo: score,
        });
        loaded.push(c);
    }
    let chosen = select_top_k(&metas, k)?;
    let members: Vec<DenoiserParams<f32>> = chosen
        .iter()
        .map(|m| {
            let i = metas.iter().position(|x| x.path == m.path).expect("selected from metas");
            loaded[i].params.clone()
        })
        .collect();
    let merged = merge_checkpoints(&members)?;
    let best = &chosen[0];
    let info = CheckpointInfo {
        step: chosen.iter().map(|m| m.step).max().unwrap_or(0),
        phase: "merged".into(),
        block_size: loaded[0].info.block_size,
        validation_elbo: None,
        lr: loaded[metas.iter().position(|x| x.path == best.path).expect("present")].info.lr,
    };
    Ok((Checkpoint::new(merged, info), chosen.into_iter().map(|m| m.path).collect()))
}

/// Generation quality and parallelism over a set of prompts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub exact_match: f64,
    pub tpf: f64,
    pub generated_tokens: usize,
    pub forward_passes: usize,
    /// Mean probability assigned to reference tokens that are also the
    /// argmax, on a fully masked first response block.
    pub mean_confidence_correct: f64,
    pub threshold: f64,
    pub block_size: usize,
}

/// Generated text with the trailing EOS run removed.
pub fn completion_text(tokens: &[Token]) -> Vec<u8> {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    decode(&tokens[..end])
}

/// `cfg` with the generation budget cut to what fits after `prompt_len`
/// tokens in a context of `max_len`.
pub fn fit_decode(cfg: &DecodeConfig, max_len: usize, prompt_len: usize) -> DecodeConfig {
    DecodeConfig {
        max_new_tokens: cfg.max_new_tokens.min(max_len.saturating_sub(prompt_len)),
        ..*cfg
    }
}

/// Exact match, tokens per forward and confidence on correct tokens.
pub fn score_completions(params: &DenoiserParams<f32>, pairs: &[PairExample], cfg: &DecodeConfig) -> Result<EvalReport> {
    let (mut hits, mut gen, mut fwd) = (0usize, 0usize, 0usize);
    let (mut conf_sum, mut conf_n) = (0.0, 0usize);
    for p in pairs {
        let cfg = &fit_decode(cfg, params.config().max_len, p.prompt.len());
        let out = generate(params, &p.prompt, cfg)?;
        if completion_text(&out.tokens) == completion_text(&p.response) {
            hits += 1;
        }
        gen += out.metrics.generated_tokens;
        fwd += out.metrics.forward_passes;

        let mut state = DecodeState::new(params, &p.prompt, cfg)?;
        let len = cfg.block_size.min(cfg.max_new_tokens).min(p.response.len());
        if len == 0 {
            continue;
        }
        state.open_block(len)?;
        let rows = forward_decode(params, &mut state)?;
        for (row, &target) in rows.iter().zip(&p.response) {
            let (argmax, probs) = softmax_argmax(row);
            if argmax == target {
                conf_sum += probs;
                conf_n += 1;
            }
        }
    }
    let n = pairs.len();
    Ok(EvalReport {
        examples: n,
        exact_match: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        tpf: if fwd == 0 { 0.0 } else { gen as f64 / fwd as f64 },
        generated_tokens: gen,
        forward_passes: fwd,
        mean_confidence_correct: if conf_n == 0 { 0.0 } else { conf_sum / conf_n as f64 },
        threshold: cfg.threshold,
        block_size: cfg.block_size,
    })
}

/// Argmax over the full row and its softmax probability.
fn softmax_argmax(row: &[f64]) -> (Token, f64) {
    let (mut best, mut mx) = (0, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if v > mx {
            best = i;
            mx = v;
        }
    }
    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
    (best, 1.0 / z)
}

/// One cell of the decoding grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCell {
    pub threshold: f64,
    pub block_size: usize,
    pub report: EvalReport,
}

/// Evaluates every threshold and block size combination.
pub fn bench_grid(
    params: &DenoiserParams<f32>,
    pairs: &[PairExample],
    base: &DecodeConfig,
    thresholds: &[f64],
    block_sizes: &[usize],
) -> Result<Vec<BenchCell>> {
    let mut out = Vec::new();
    for &b in block_sizes {
        for &t in thresholds {
            let cfg = DecodeConfig {
                threshold: t,
                block_size: b,
                ..*base
            };
            out.push(BenchCell {
                threshold: t,
                block_size: b,
                report: score_completions(params, pairs, &cfg)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_uses_smoothed_losses() {
        let mut l = vec![1.0; 10];
        l.push(5.0);
        l.extend(vec![1.0; 9]);
        let d = DivergenceCheck::from_losses(&l, 10, 3.0).unwrap();
        assert!(!d.diverged);
        assert!((d.max_smoothed_loss - 1.4).abs() < 1e-12);
        let rising: Vec<f64> = (0..40).map(|i| 1.0 + i as f64 * 0.2).collect();
        assert!(DivergenceCheck::from_losses(&rising, 10, 3.0).unwrap().diverged);
        assert!(DivergenceCheck::from_losses(&[], 10, 3.0).is_none());
    }

    #[test]
    fn eos_fill_rounds_up() {
        let p = PairExample::from_text("1+1=", "2", Some("33")).unwrap();
        let f = fill_eos(&[p], 4);
        assert_eq!(f[0].response, vec![b'2' as Token, EOS, EOS, EOS]);
        assert_eq!(f[0].rejected.as_ref().unwrap().len(), 4);
        assert_eq!(fill_eos(&f, 1), f);
    }

    #[test]
    fn validation_split_keeps_training_data() {
        let docs: Vec<Vec<Token>> = (0..10).map(|i| vec![i]).collect();
        let (t, v) = split_validation(docs.clone(), 0.05);
        assert_eq!((t.len(), v), (9, vec![vec![9]]));
        let (t, v) = split_validation(vec![vec![1]], 0.5);
        assert_eq!((t.len(), v.len()), (1, 0));
    }

    /// Rows that still hold one pair each only drop PAD columns.
    #[test]
    fn shorter_pair_rows_train_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 16;
        cfg.model.n_layers = 1;
        cfg.model.n_heads = 2;
        cfg.model.d_ff = 32;
        cfg.model.max_len = 32;
        cfg.train.seq_len = 24;
        cfg.train.batch_size = 4;
        cfg.final_block_size = 8;
        cfg.eos_fill = 8;
        cfg.budget.sft_tokens = 400;
        cfg.timing = false;
        let start = Checkpoint::new(DenoiserParams::init(cfg.model, 1).unwrap(), CheckpointInfo::default());
        let pairs: Vec<PairExample> = (10..30)
            .map(|x| PairExample::from_text(&format!("{x}+{x}="), &(2 * x).to_string(), None).unwrap())
            .collect();
        let mut bytes = Vec::new();
        for rows in [0, 15] {
            let mut c = cfg.clone();
            c.sft_seq_len = rows;
            c.out_dir = dir.path().join(format!("rows{rows}")).display().to_string();
            let mut run = Run::open(c).unwrap();
            run.sft(&start, &pairs).unwrap();
            bytes.push(fs::read(run.path("sft.ckpt")).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn completion_text_stops_at_eos() {
        assert_eq!(completion_text(&[b'4' as Token, b'2' as Token, EOS, EOS]), b"42");
        assert_eq!(completion_text(&[b'4' as Token]), b"4");
    }
}
