//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; extra arguments select
//! criteria by number, e.g. `cargo test --test acceptance -- 1 4 9`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use bdlm::checkpoint::Checkpoint;
use bdlm::config::RunConfig;
use bdlm::corpus::PairMode;
use bdlm::grammar::{GrammarCorpus, GrammarSpec};
use bdlm::pipeline::{self, fill_eos, EvalReport, Run};
use bdlm::verify::{self, GradObjective, OracleReport};
use bdlm_core::model::{DenoiserParams, ModelConfig};
use bdlm_core::rng::rng;
use bdlm_core::schedule::merge_checkpoints;
use rand::Rng;

const SEED: u64 = 20_241;
const E2E_CONFIG: &str = include_str!("../configs/grammar_e2e.conf");

struct Outcome {
    pass: bool,
    detail: String,
}

fn oracles(reports: &[OracleReport]) -> Outcome {
    let pass = reports.iter().all(|r| r.passed);
    let detail = reports
        .iter()
        .map(|r| {
            let mut s = format!("{} cases={} max_dev={:.3e} tol={:.0e}", r.name, r.cases, r.max_deviation, r.tolerance);
            if let Some(c) = &r.counterexample {
                s.push_str(&format!(" counterexample={c}"));
            }
            s
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { pass, detail }
}

fn c1() -> Outcome {
    let t = Instant::now();
    let mut o = oracles(&[verify::mask_oracle(12)]);
    let secs = t.elapsed().as_secs_f64();
    o.pass &= secs < 60.0;
    o.detail.push_str(&format!("; runtime {secs:.2}s (limit 60s)"));
    o
}

fn c2() -> Outcome {
    let reports = verify::loss_oracle(100, SEED);
    let wanted = ["loss_oracle/bdlm_k1_equals_mdlm", "loss_oracle/full_mask_block1"];
    let mut o = oracles(&reports.iter().filter(|r| wanted.contains(&r.name.as_str())).cloned().collect::<Vec<_>>());
    let extra = oracles(&reports.iter().filter(|r| !wanted.contains(&r.name.as_str())).cloned().collect::<Vec<_>>());
    o.pass &= extra.pass;
    o.detail = format!("{}; also {}", o.detail, extra.detail);
    o
}

fn c3() -> Outcome {
    oracles(&GradObjective::ALL.map(|obj| verify::gradcheck(obj, 100, SEED)))
}

fn c4() -> Outcome {
    oracles(&verify::dpo_identity(20, SEED))
}

fn c5() -> Outcome {
    oracles(&[verify::complementary_oracle(10_000, SEED)])
}

fn c6() -> Outcome {
    let mut reports = verify::decoder_oracle(100, SEED);
    reports.push(verify::decode_mask_oracle(4, 3, 4));
    oracles(&reports)
}

fn random_params(seed: u64) -> DenoiserParams<f32> {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 16,
        ..ModelConfig::default()
    };
    DenoiserParams::init(cfg, seed).unwrap()
}

fn c9() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let p = random_params(1);
    let idem = (1..=5).all(|n| merge_checkpoints(&vec![p.clone(); n]).unwrap() == p);
    notes.push(format!("idempotent for 1..=5 copies: {idem}"));
    pass &= idem;

    // members on a 1/64 grid, where the mean is exactly representable
    let mut r = rng(SEED);
    let mut members = vec![random_params(2), random_params(3), random_params(4), random_params(5)];
    for m in &mut members {
        for t in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-512i32..512) as f32 / 64.0);
        }
    }
    let merged = merge_checkpoints(&members).unwrap();
    let mut exact = true;
    for (i, (_, t)) in merged.tensors().iter().enumerate() {
        for (j, &v) in t.data().iter().enumerate() {
            let mean = members.iter().map(|m| m.tensors()[i].1.data()[j] as f64).sum::<f64>() / members.len() as f64;
            exact &= v as f64 == mean;
        }
    }
    notes.push(format!("exact mean on 1/64-grid inputs: {exact}"));
    pass &= exact;

    let random: Vec<DenoiserParams<f32>> = (10..13).map(random_params).collect();
    let base = merge_checkpoints(&random).unwrap();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let inv = perms.iter().all(|p| merge_checkpoints(&p.map(|i| random[i].clone())).unwrap() == base);
    notes.push(format!("bitwise permutation invariant over all 6 orders: {inv}"));
    pass &= inv;
    Outcome {
        pass,
        detail: notes.join("; "),
    }
}

const TINY: &str = "\
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.d_ff = 32
model.max_len = 64
train.batch_size = 4
train.seq_len = 64
budget.pretrain_tokens = 3000
budget.convert_tokens = 6000
budget.sft_tokens = 1500
schedule.final_block_size = 8
sft.eos_fill = 8
log.timing = false
";

fn tiny_run(dir: &Path) -> (Vec<u8>, Vec<Vec<u8>>) {
    let corpus = GrammarCorpus::generate(&GrammarSpec {
        pretrain_tokens: 4000,
        ..GrammarSpec::default()
    });
    let files = corpus.write_files(&dir.join("data"), SEED).unwrap();
    let mut cfg = RunConfig::parse_str(TINY).unwrap();
    cfg.corpus = files.corpus.display().to_string();
    cfg.out_dir = dir.join("run").display().to_string();
    let docs = pipeline::load_corpus(&cfg).unwrap();
    let pairs = pipeline::load_pairs(&files.sft.display().to_string(), "data.pairs", PairMode::Sft).unwrap();
    let (train, valid) = pipeline::split_validation(docs, cfg.valid_fraction);
    let mut run = Run::open(cfg).unwrap();
    run.pretrain(&train).unwrap();
    let pre = Checkpoint::load(&run.path("pretrain.ckpt")).unwrap();
    let conv = run.convert(&pre, &train, &valid).unwrap();
    let last = Checkpoint::load(&run.path(&conv.checkpoint)).unwrap();
    run.sft(&last, &pairs[..200]).unwrap();
    let mut ckpts = Vec::new();
    let mut names: Vec<String> = std::fs::read_dir(&run.dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    names.sort();
    for n in &names {
        ckpts.push(std::fs::read(run.path(n)).unwrap());
    }
    (std::fs::read(run.path("metrics.jsonl")).unwrap(), ckpts)
}

fn c10() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (log_a, ck_a) = tiny_run(a.path());
    let (log_b, ck_b) = tiny_run(b.path());
    let same_log = log_a == log_b;
    let same_ckpt = ck_a == ck_b;
    Outcome {
        pass: same_log && same_ckpt && !log_a.is_empty() && ck_a.len() >= 3,
        detail: format!(
            "metrics log {} bytes identical: {same_log}; {} checkpoints byte-identical: {same_ckpt}",
            log_a.len(),
            ck_a.len()
        ),
    }
}

/// State shared by the end-to-end criteria.
struct EndToEnd {
    run: Run,
    eval: Vec<bdlm_core::packing::PairExample>,
    converted: Checkpoint,
    sft: EvalReport,
    diverged: Vec<String>,
    max_ratio: f64,
    seconds: f64,
    _dir: tempfile::TempDir,
}

fn end_to_end() -> EndToEnd {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse_str(E2E_CONFIG).unwrap();
    let corpus = GrammarCorpus::generate(&GrammarSpec {
        seed: cfg.train.seed,
        pretrain_tokens: 300_000,
        ..GrammarSpec::default()
    });
    let files = corpus.write_files(&dir.path().join("data"), cfg.train.seed).unwrap();
    cfg.corpus = files.corpus.display().to_string();
    cfg.pairs = files.sft.display().to_string();
    cfg.eval_pairs = files.eval.display().to_string();
    cfg.out_dir = dir.path().join("run").display().to_string();

    let docs = pipeline::load_corpus(&cfg).unwrap();
    let pairs = pipeline::load_pairs(&cfg.pairs, "data.pairs", PairMode::Sft).unwrap();
    let mut eval = pipeline::load_pairs(&cfg.eval_pairs, "data.eval", PairMode::Sft).unwrap();
    eval.truncate(cfg.eval_examples);
    let eval = fill_eos(&eval, cfg.eos_fill);
    let (train, valid) = pipeline::split_validation(docs, cfg.valid_fraction);

    let mut run = Run::open(cfg).unwrap();
    let mut phases = run.pretrain(&train).unwrap().phases;
    let pre = Checkpoint::load(&run.path("pretrain.ckpt")).unwrap();
    let conv = run.convert(&pre, &train, &valid).unwrap();
    phases.extend(conv.phases.clone());
    let converted = Checkpoint::load(&run.path(&conv.checkpoint)).unwrap();
    phases.extend(run.sft(&converted, &pairs).unwrap().phases);
    let tuned = Checkpoint::load(&run.path("sft.ckpt")).unwrap();
    let sft = pipeline::score_completions(&tuned.params, &eval, &run.cfg.decode_config()).unwrap();
    let seconds = started.elapsed().as_secs_f64();

    for p in &phases {
        if let Some(d) = &p.divergence {
            eprintln!(
                "  phase {:<10} b{:<3} steps {:>5} start {:.3} max(smoothed) {:.3} ratio {:.2} last {:.3} valid {:?}",
                p.name,
                p.block_size,
                p.steps,
                d.start_loss,
                d.max_smoothed_loss,
                d.ratio,
                p.last_loss.unwrap_or(f64::NAN),
                p.validation_elbo
            );
        }
    }
    let diverged = phases
        .iter()
        .filter(|p| p.divergence.as_ref().is_some_and(|d| d.diverged))
        .map(|p| p.name.clone())
        .collect();
    let max_ratio = phases
        .iter()
        .filter_map(|p| p.divergence.as_ref().map(|d| d.ratio))
        .fold(0.0, f64::max);
    EndToEnd {
        run,
        eval,
        converted,
        sft,
        diverged,
        max_ratio,
        seconds,
        _dir: dir,
    }
}

fn c7(e: &EndToEnd) -> Outcome {
    let pass = e.diverged.is_empty() && e.sft.exact_match >= 0.95 && e.sft.tpf > 1.2 && e.seconds < 1800.0;
    Outcome {
        pass,
        detail: format!(
            "held-out exact match {:.4} over {} problems (need >= 0.95); tpf {:.3} at threshold {} block {} (need > 1.2); \
             max smoothed loss ratio {:.2} (limit 3), diverged phases {:?}; wall time {:.0}s (limit 1800s)",
            e.sft.exact_match, e.sft.examples, e.sft.tpf, e.sft.threshold, e.sft.block_size, e.max_ratio, e.diverged, e.seconds
        ),
    }
}

fn c8(e: &mut EndToEnd) -> Outcome {
    let pairs = pipeline::load_pairs(&e.run.cfg.pairs.clone(), "data.pairs", PairMode::Sft).unwrap();
    e.run.cfg.sft_cap = true;
    e.run.sft(&e.converted, &pairs).unwrap();
    let cap = Checkpoint::load(&e.run.path("cap.ckpt")).unwrap();
    let with = pipeline::score_completions(&cap.params, &e.eval, &e.run.cfg.decode_config()).unwrap();
    let base = &e.sft;
    let drop_pp = 100.0 * (base.exact_match - with.exact_match);
    let pass = with.mean_confidence_correct > base.mean_confidence_correct && with.tpf > base.tpf && drop_pp <= 2.0;
    Outcome {
        pass,
        detail: format!(
            "lambda {}: mean confidence on correct tokens {:.4} -> {:.4}; tpf {:.3} -> {:.3}; exact match {:.4} -> {:.4} (drop {:.2} pp, limit 2)",
            e.run.cfg.train.cap.lambda,
            base.mean_confidence_correct,
            with.mean_confidence_correct,
            base.tpf,
            with.tpf,
            base.exact_match,
            with.exact_match,
            drop_pp
        ),
    }
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut lines = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        let line = format!("CRITERION {n:>2} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push((n, o.pass));
    };
    let quick: [(u32, fn() -> Outcome); 8] = [(1, c1), (2, c2), (3, c3), (4, c4), (5, c5), (6, c6), (9, c9), (10, c10)];
    for (n, f) in quick {
        if wants(n) {
            report(n, f());
        }
    }
    if wants(7) || wants(8) {
        let mut e = end_to_end();
        if wants(7) {
            report(7, c7(&e));
        }
        if wants(8) {
            report(8, c8(&mut e));
        }
    }
    lines.sort();
    let failed: Vec<u32> = lines.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria pass", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
