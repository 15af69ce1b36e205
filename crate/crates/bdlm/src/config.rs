//! Flat `key = value` run configuration.
//!
//! Every tunable of a run lives under one dotted key. Files are UTF-8, one
//! assignment per line, `#` starts a comment. Unknown keys, duplicate keys,
//! malformed values and out-of-range values are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bdlm_core::decode::DecodeConfig;
use bdlm_core::model::ModelConfig;
use bdlm_core::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{at}: expected `key = value`, found `{text}`")]
    Syntax { at: String, text: String },
    #[error("{at}: unknown config key `{key}`")]
    UnknownKey { at: String, key: String },
    #[error("{at}: key `{key}` is set twice")]
    Duplicate { at: String, key: String },
    #[error("{at}: `{key}` expects {expected}, found `{value}`")]
    Type {
        at: String,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("{at}: `{key} = {value}` is out of range ({doc})")]
    Range {
        at: String,
        key: String,
        value: String,
        doc: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ConfigError {
    /// Problems with user input rather than the environment.
    pub fn is_usage(&self) -> bool {
        !matches!(self, ConfigError::Io { .. })
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

/// A value that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    const KIND: &'static str;
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for usize {
    const KIND: &'static str = "a non-negative integer";
    fn parse_value(s: &str) -> Option<Self> {
        s.replace('_', "").parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    const KIND: &'static str = "a non-negative integer";
    fn parse_value(s: &str) -> Option<Self> {
        s.replace('_', "").parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    const KIND: &'static str = "a finite number";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse::<f64>().ok().filter(|v| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    const KIND: &'static str = "`true` or `false`";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    const KIND: &'static str = "a string";
    fn parse_value(s: &str) -> Option<Self> {
        let s = s.strip_prefix('"').and_then(|x| x.strip_suffix('"')).unwrap_or(s);
        Some(s.to_string())
    }
    fn render(&self) -> String {
        if self.is_empty() || self.trim() != self || self.contains('#') {
            format!("\"{self}\"")
        } else {
            self.clone()
        }
    }
}

/// Optional `lo,hi` mask-rate band; `none` disables it.
impl ConfigValue for Option<(f64, f64)> {
    const KIND: &'static str = "`none` or `lo,hi`";
    fn parse_value(s: &str) -> Option<Self> {
        if s == "none" {
            return Some(None);
        }
        let (a, b) = s.split_once(',')?;
        Some(Some((f64::parse_value(a.trim())?, f64::parse_value(b.trim())?)))
    }
    fn render(&self) -> String {
        match self {
            None => "none".into(),
            Some((a, b)) => format!("{},{}", a.render(), b.render()),
        }
    }
}

/// Token budgets of the training commands.
#[derive(Debug, Clone, PartialEq)]
pub struct Budgets {
    pub pretrain_tokens: usize,
    pub convert_tokens: usize,
    pub sft_tokens: usize,
    pub dpo_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Training settings; `train.decode` holds the decoding settings.
    pub train: TrainConfig,
    pub budget: Budgets,
    pub final_block_size: usize,
    /// Peak learning rates of conversion and fine-tuning relative to `train.lr`.
    pub convert_lr_scale: f64,
    pub sft_lr_scale: f64,
    /// Row length for fine-tuning rows; 0 uses `train.seq_len`.
    pub sft_seq_len: usize,
    /// Jump straight from block size 1 to the full length (ablation).
    pub skip_warmup: bool,
    pub sft_cap: bool,
    /// Pad responses with EOS to a multiple of this many tokens (0 disables).
    pub eos_fill: usize,
    pub elbo_samples: usize,
    pub eval_examples: usize,
    /// Fraction of documents held out for validation ELBO.
    pub valid_fraction: f64,
    pub merge_k: usize,
    /// Record wall-clock throughput in metrics (makes logs non-reproducible).
    pub timing: bool,
    pub corpus: String,
    pub pairs: String,
    pub eval_pairs: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            budget: Budgets {
                pretrain_tokens: 1_000_000,
                convert_tokens: 1_000_000,
                sft_tokens: 200_000,
                dpo_tokens: 20_000,
            },
            final_block_size: 32,
            convert_lr_scale: 1.0,
            sft_lr_scale: 1.0,
            sft_seq_len: 0,
            skip_warmup: false,
            sft_cap: false,
            eos_fill: 0,
            elbo_samples: 4,
            eval_examples: 200,
            valid_fraction: 0.05,
            merge_k: 3,
            timing: true,
            corpus: String::new(),
            pairs: String::new(),
            eval_pairs: String::new(),
            out_dir: "run".into(),
        }
    }
}

/// Name, value type and description of one key.
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub name: &'static str,
    pub kind: &'static str,
    pub doc: &'static str,
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $ty:ty, $doc:literal, |$v:ident| $ok:expr;)*) => {
        /// All keys in canonical order.
        pub const KEYS: &[KeyDoc] = &[$(KeyDoc { name: $key, kind: <$ty as ConfigValue>::KIND, doc: $doc }),*];

        impl RunConfig {
            fn assign(&mut self, key: &str, raw: &str, at: &str) -> Result<()> {
                match key {
                    $($key => {
                        let value = <$ty as ConfigValue>::parse_value(raw).ok_or_else(|| ConfigError::Type {
                            at: at.to_string(),
                            key: key.to_string(),
                            expected: <$ty as ConfigValue>::KIND,
                            value: raw.to_string(),
                        })?;
                        let in_range = {
                            let $v = &value;
                            $ok
                        };
                        if !in_range {
                            return Err(ConfigError::Range {
                                at: at.to_string(),
                                key: key.to_string(),
                                value: raw.to_string(),
                                doc: $doc,
                            });
                        }
                        self.$($field).+ = value;
                    })*
                    _ => {
                        return Err(ConfigError::UnknownKey {
                            at: at.to_string(),
                            key: key.to_string(),
                        })
                    }
                }
                Ok(())
            }

            /// Rendered value of `key`, or `None` for unknown keys.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(ConfigValue::render(&self.$($field).+)),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "seed" => train.seed: u64, "base seed for initialization, data order and noise", |_v| true;
    "model.d_model" => model.d_model: usize, "hidden width, >= 1", |v| *v >= 1;
    "model.n_layers" => model.n_layers: usize, "transformer layers, >= 1", |v| *v >= 1;
    "model.n_heads" => model.n_heads: usize, "attention heads, >= 1, dividing d_model into even head widths", |v| *v >= 1;
    "model.d_ff" => model.d_ff: usize, "feed-forward width, >= 1", |v| *v >= 1;
    "model.max_len" => model.max_len: usize, "longest position the model accepts, >= 1", |v| *v >= 1;
    "model.rope_base" => model.rope_base: f64, "rotary embedding base, > 1", |v| *v > 1.0;
    "train.batch_size" => train.batch_size: usize, "examples per optimizer step, >= 1", |v| *v >= 1;
    "train.seq_len" => train.seq_len: usize, "packed row length, >= 1", |v| *v >= 1;
    "train.lr" => train.lr: f64, "peak learning rate, > 0", |v| *v > 0.0;
    "train.warmup_steps" => train.warmup_steps: usize, "linear warmup steps per phase (capped at half the phase)", |_v| true;
    "train.min_lr_ratio" => train.min_lr_ratio: f64, "cosine floor as a fraction of the peak, in [0, 1]", |v| (0.0..=1.0).contains(v);
    "train.complementary" => train.complementary: bool, "complementary masking during supervised fine-tuning", |_v| true;
    "optim.beta1" => train.optimizer.beta1: f64, "AdamW first-moment decay, in [0, 1)", |v| (0.0..1.0).contains(v);
    "optim.beta2" => train.optimizer.beta2: f64, "AdamW second-moment decay, in [0, 1)", |v| (0.0..1.0).contains(v);
    "optim.eps" => train.optimizer.eps: f64, "AdamW denominator epsilon, > 0", |v| *v > 0.0;
    "optim.weight_decay" => train.optimizer.weight_decay: f64, "decoupled weight decay (norm gains exempt), >= 0", |v| *v >= 0.0;
    "optim.clip_norm" => train.optimizer.clip_norm: f64, "global gradient-norm clip, > 0", |v| *v > 0.0;
    "stabilizer.sigma" => train.stabilizer.sigma: f64, "std of noise on MASK embeddings early in conversion, >= 0", |v| *v >= 0.0;
    "stabilizer.active_steps" => train.stabilizer.active_steps: usize, "diffusion steps during which the stabilizer is on", |_v| true;
    "noise.t_min" => train.noise.t_min: f64, "smallest sampled timestep, in (0, 1]", |v| *v > 0.0 && *v <= 1.0;
    "noise.t_max" => train.noise.t_max: f64, "largest sampled timestep, in (0, 1]", |v| *v > 0.0 && *v <= 1.0;
    "noise.bandwidth" => train.noise.bandwidth: Option<(f64, f64)>, "mask-rate band `lo,hi` within [0, 1], or none", |v| v.is_none_or(|(a, b)| 0.0 <= a && a <= b && b <= 1.0);
    "cap.lambda" => train.cap.lambda: f64, "weight of the confidence term, >= 0", |v| *v >= 0.0;
    "dpo.beta" => train.dpo.beta: f64, "preference temperature, > 0", |v| *v > 0.0;
    "dpo.mc_samples" => train.dpo.mc_samples: usize, "noise draws per ELBO estimate, >= 1", |v| *v >= 1;
    "dpo.shared_noise" => train.dpo.shared_noise: bool, "share noise draws between chosen and rejected responses", |_v| true;
    "decode.block_size" => train.decode.block_size: usize, "tokens decoded per block, >= 1", |v| *v >= 1;
    "decode.threshold" => train.decode.threshold: f64, "confidence needed to accept a token, in (0, 1]", |v| *v > 0.0 && *v <= 1.0;
    "decode.fallback_count" => train.decode.fallback_count: usize, "tokens accepted per step when none clear the threshold, >= 1", |v| *v >= 1;
    "decode.temperature" => train.decode.temperature: f64, "sampling temperature; 0 is greedy, >= 0", |v| *v >= 0.0;
    "decode.max_new_tokens" => train.decode.max_new_tokens: usize, "generation budget in tokens", |_v| true;
    "decode.seed" => train.decode.seed: u64, "sampling seed for temperature > 0", |_v| true;
    "decode.use_cache" => train.decode.use_cache: bool, "reuse keys and values of finalized blocks", |_v| true;
    "budget.pretrain_tokens" => budget.pretrain_tokens: usize, "supervised tokens for autoregressive pretraining", |_v| true;
    "budget.convert_tokens" => budget.convert_tokens: usize, "supervised tokens across all conversion phases", |_v| true;
    "budget.sft_tokens" => budget.sft_tokens: usize, "supervised response tokens for fine-tuning", |_v| true;
    "budget.dpo_tokens" => budget.dpo_tokens: usize, "chosen plus rejected tokens for preference tuning", |_v| true;
    "schedule.final_block_size" => final_block_size: usize, "block size after conversion, >= 1, dividing train.seq_len", |v| *v >= 1;
    "schedule.skip_warmup" => skip_warmup: bool, "replace the warmup ladder by one jump to the full length", |_v| true;
    "schedule.convert_lr_scale" => convert_lr_scale: f64, "conversion peak learning rate as a multiple of train.lr, > 0", |v| *v > 0.0;
    "sft.lr_scale" => sft_lr_scale: f64, "fine-tuning peak learning rate as a multiple of train.lr, > 0", |v| *v > 0.0;
    "sft.seq_len" => sft_seq_len: usize, "row length of fine-tuning and preference batches; 0 uses train.seq_len", |_v| true;
    "sft.cap" => sft_cap: bool, "add the confidence term during fine-tuning", |_v| true;
    "sft.eos_fill" => eos_fill: usize, "pad responses with EOS to a multiple of this length; 0 disables", |_v| true;
    "eval.elbo_samples" => elbo_samples: usize, "noise draws per validation ELBO, >= 1", |v| *v >= 1;
    "eval.max_examples" => eval_examples: usize, "pairs scored by exact match, >= 1", |v| *v >= 1;
    "eval.valid_fraction" => valid_fraction: f64, "share of documents held out for validation, in [0, 0.5]", |v| (0.0..=0.5).contains(v);
    "merge.k" => merge_k: usize, "checkpoints averaged by merge, >= 1", |v| *v >= 1;
    "log.timing" => timing: bool, "record tokens per second (wall clock) in metrics", |_v| true;
    "data.corpus" => corpus: String, "plain-text corpus, documents separated by blank lines", |_v| true;
    "data.pairs" => pairs: String, "JSON-lines prompt/response (and rejected) pairs", |_v| true;
    "data.eval" => eval_pairs: String, "JSON-lines pairs scored by exact match", |_v| true;
    "out.dir" => out_dir: String, "directory for checkpoints, metrics and the effective config", |_v| true;
}

impl RunConfig {
    /// Parses a config document on top of the defaults and validates it.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Applies the assignments of `text` without final validation.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let at = format!("line {}", i + 1);
            let content = strip_comment(line).trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    at,
                    text: line.to_string(),
                });
            };
            let key = k.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    at,
                    key: key.to_string(),
                });
            }
            self.assign(key, v.trim(), &at)?;
        }
        Ok(())
    }

    /// Sets one key; `origin` names the source in error messages.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        self.assign(key, value.trim(), origin)
    }

    /// Applies `key=value` overrides such as those given by `--set`.
    pub fn apply_overrides(&mut self, items: &[String]) -> Result<()> {
        for item in items {
            let Some((k, v)) = item.split_once('=') else {
                return Err(ConfigError::Syntax {
                    at: "--set".into(),
                    text: item.clone(),
                });
            };
            self.set(k.trim(), v, "--set")?;
        }
        Ok(())
    }

    /// Checks constraints that span several keys.
    pub fn validate(&self) -> Result<()> {
        let core = |e: bdlm_core::error::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(core)?;
        let mut train = self.train.clone();
        train.optimizer.lr = train.lr;
        train.validate().map_err(core)?;
        let l = self.train.seq_len;
        if l > self.model.max_len {
            return Err(ConfigError::Invalid(format!(
                "train.seq_len {l} exceeds model.max_len {}",
                self.model.max_len
            )));
        }
        if l % self.final_block_size != 0 {
            return Err(ConfigError::Invalid(format!(
                "schedule.final_block_size {} does not divide train.seq_len {l}",
                self.final_block_size
            )));
        }
        if self.sft_seq_len > self.model.max_len {
            return Err(ConfigError::Invalid(format!(
                "sft.seq_len {} exceeds model.max_len {}",
                self.sft_seq_len, self.model.max_len
            )));
        }
        Ok(())
    }

    /// Canonical document: every key with its description, in key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "# {} ({})", k.doc, k.kind);
            let _ = writeln!(out, "{} = {}", k.name, self.get(k.name).expect("known key"));
        }
        out
    }

    /// Training configuration with the optimizer rate tied to `train.lr`.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.optimizer.lr = t.lr;
        t
    }

    pub fn decode_config(&self) -> DecodeConfig {
        self.train.decode
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}
