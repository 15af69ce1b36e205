use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdlm::checkpoint::Checkpoint;
use bdlm::config::{ConfigError, RunConfig, KEYS};
use bdlm::corpus::PairMode;
use bdlm::grammar::{GrammarCorpus, GrammarSpec};
use bdlm::pipeline::{self, fill_eos, PipelineError, Run};
use bdlm::verify;
use bdlm_core::decode::generate;
use bdlm_core::vocab::encode;
use clap::{Args, Parser, Subcommand};

/// Block diffusion language model toolkit: convert an auto-regressive model
/// into a block-diffusion model, fine-tune it and decode in parallel.
#[derive(Parser)]
#[command(name = "bdlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-3`; repeatable and applied
    /// after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (same as `--set out.dir=...`).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Auto-regressive pretraining on `data.corpus`.
    Pretrain(Common),
    /// Block-size conversion of a pretrained checkpoint.
    Convert {
        #[command(flatten)]
        common: Common,
        /// Input checkpoint; defaults to `<out.dir>/pretrain.ckpt`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Supervised fine-tuning on `data.pairs` (confidence-aware with `sft.cap=true`).
    Sft {
        #[command(flatten)]
        common: Common,
        /// Input checkpoint; defaults to the last conversion checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Preference optimization on `data.pairs` with chosen/rejected responses.
    Dpo {
        #[command(flatten)]
        common: Common,
        /// Input checkpoint; it also serves as the frozen reference.
        #[arg(long)]
        from: PathBuf,
    },
    /// Exact match, tokens per forward and confidence on `data.eval`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Decode one prompt; the completion goes to stdout, metrics to stderr.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
    },
    /// Average the `merge.k` checkpoints with the best validation score.
    Merge {
        #[command(flatten)]
        common: Common,
        /// Output checkpoint.
        #[arg(long)]
        output: PathBuf,
        /// Candidate checkpoints.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Decoding grid over thresholds and block sizes, one JSON line per cell.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.7, 0.9, 0.95, 1.0])]
        thresholds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![4, 8, 16, 32])]
        block_sizes: Vec<usize>,
    },
    /// Write the synthetic grammar corpus and pair files.
    Grammar {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Approximate corpus size in bytes.
        #[arg(long, default_value_t = 300_000)]
        tokens: usize,
    },
    /// Run the oracle suite; one JSON line per oracle.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List every config key with its meaning, or print the effective config.
    Config {
        #[command(flatten)]
        common: Common,
        /// Print the effective configuration instead of the key list.
        #[arg(long)]
        effective: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(e) if e.is_usage() => 2,
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<bdlm::checkpoint::CheckpointError> for CliError {
    fn from(e: bdlm::checkpoint::CheckpointError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<bdlm_core::error::Error> for CliError {
    fn from(e: bdlm_core::error::Error) -> Self {
        CliError::Pipeline(e.into())
    }
}

/// Defaults, then the config file, then `--set` and `--out`.
fn resolve(common: &Common) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        cfg.apply_str(&text)?;
    }
    cfg.apply_overrides(&common.overrides)?;
    if let Some(out) = &common.out {
        cfg.set("out.dir", out, "--out")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn last_conversion_checkpoint(run: &Run) -> Result<PathBuf, CliError> {
    let phases = run.conversion_phases()?;
    let mut counts = std::collections::HashMap::new();
    let mut last = None;
    for p in phases {
        let c = counts.entry(p.kind.name()).or_insert(0);
        last = Some(run.path(&format!("convert-{}.ckpt", p.label(*c))));
        *c += 1;
    }
    last.ok_or_else(|| CliError::Usage("the conversion schedule is empty".into()))
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path)?)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = resolve(&common)?;
            let docs = pipeline::load_corpus(&cfg)?;
            let mut run = Run::open(cfg)?;
            print_json(&run.pretrain(&docs)?);
        }
        Command::Convert { common, from } => {
            let cfg = resolve(&common)?;
            let docs = pipeline::load_corpus(&cfg)?;
            let (train, valid) = pipeline::split_validation(docs, cfg.valid_fraction);
            let mut run = Run::open(cfg)?;
            let start = load(&from.unwrap_or_else(|| run.path("pretrain.ckpt")))?;
            let report = run.convert(&start, &train, &valid)?;
            print_json(&report);
            if report.diverged() {
                return Err(CliError::Failed("a conversion phase diverged".into()));
            }
        }
        Command::Sft { common, from } => {
            let cfg = resolve(&common)?;
            let pairs = pipeline::load_pairs(&cfg.pairs, "data.pairs", PairMode::Sft)?;
            let mut run = Run::open(cfg)?;
            let from = match from {
                Some(f) => f,
                None => last_conversion_checkpoint(&run)?,
            };
            print_json(&run.sft(&load(&from)?, &pairs)?);
        }
        Command::Dpo { common, from } => {
            let cfg = resolve(&common)?;
            let pairs = pipeline::load_pairs(&cfg.pairs, "data.pairs", PairMode::Preference)?;
            let mut run = Run::open(cfg)?;
            print_json(&run.dpo(&load(&from)?, &pairs)?);
        }
        Command::Eval { common, ckpt } => {
            let cfg = resolve(&common)?;
            let mut pairs = pipeline::load_pairs(&cfg.eval_pairs, "data.eval", PairMode::Sft)?;
            pairs.truncate(cfg.eval_examples);
            let pairs = fill_eos(&pairs, cfg.eos_fill);
            let c = load(&ckpt)?;
            print_json(&pipeline::score_completions(&c.params, &pairs, &cfg.decode_config())?);
        }
        Command::Generate { common, ckpt, prompt } => {
            let cfg = resolve(&common)?;
            if prompt.is_empty() {
                return Err(CliError::Usage("--prompt must be non-empty".into()));
            }
            let c = load(&ckpt)?;
            let started = std::time::Instant::now();
            let tokens = encode(prompt.as_bytes());
            let dc = pipeline::fit_decode(&cfg.decode_config(), c.params.config().max_len, tokens.len());
            let out = generate(&c.params, &tokens, &dc)?;
            let mut m = out.metrics.clone();
            let secs = started.elapsed().as_secs_f64();
            m.tps = if secs > 0.0 { m.generated_tokens as f64 / secs } else { 0.0 };
            println!("{}", String::from_utf8_lossy(&pipeline::completion_text(&out.tokens)));
            eprintln!(
                "{}",
                serde_json::json!({
                    "generated_tokens": m.generated_tokens,
                    "forward_passes": m.forward_passes,
                    "tpf": m.tpf,
                    "tps": if cfg.timing { Some(m.tps) } else { None },
                    "steps_per_block": m.steps_per_block,
                })
            );
        }
        Command::Merge { common, output, inputs } => {
            let cfg = resolve(&common)?;
            let (merged, chosen) = pipeline::merge_files(&inputs, cfg.merge_k)?;
            merged.save(&output)?;
            print_json(&serde_json::json!({ "output": output.display().to_string(), "members": chosen }));
        }
        Command::Bench {
            common,
            ckpt,
            thresholds,
            block_sizes,
        } => {
            let cfg = resolve(&common)?;
            if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) || block_sizes.contains(&0) {
                return Err(CliError::Usage("thresholds lie in [0, 1] and block sizes are positive".into()));
            }
            let mut pairs = pipeline::load_pairs(&cfg.eval_pairs, "data.eval", PairMode::Sft)?;
            pairs.truncate(cfg.eval_examples);
            let c = load(&ckpt)?;
            for cell in pipeline::bench_grid(&c.params, &pairs, &cfg.decode_config(), &thresholds, &block_sizes)? {
                print_json(&cell);
            }
        }
        Command::Grammar { dir, seed, tokens } => {
            let corpus = GrammarCorpus::generate(&GrammarSpec {
                seed,
                pretrain_tokens: tokens,
                ..GrammarSpec::default()
            });
            let files = corpus.write_files(&dir, seed).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
            print_json(&serde_json::json!({
                "corpus": files.corpus, "sft": files.sft, "prefs": files.prefs, "eval": files.eval,
                "documents": corpus.docs.len(), "train_problems": corpus.train.len(), "heldout_problems": corpus.heldout.len(),
            }));
        }
        Command::Verify { seed } => {
            let reports = verify::run_all(seed);
            let failed = reports.iter().filter(|r| !r.passed).count();
            for r in &reports {
                println!("{}", r.to_json_line());
            }
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} oracle(s) failed")));
            }
        }
        Command::Config { common, effective } => {
            let cfg = resolve(&common)?;
            if effective {
                print!("{}", cfg.to_text());
            } else {
                for k in KEYS {
                    println!("{:<28} {:<24} {}", k.name, k.kind, k.doc);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
