//! Oracle suite.
//!
//! Every oracle here is written from the mathematical definition with plain
//! loops and never calls into the tensor path it checks. Each report names a
//! replayable counterexample (`seed`, `case`) when it fails.

use std::f64::consts::LN_2;

use bdlm_core::decode::{decode_with_and_without_cache, generate, select_accepted, DecodeConfig};
use bdlm_core::graph::Graph;
use bdlm_core::losses::{bdlm_loss, cap_objective, dpo_draws, dpo_objective, mdlm_loss, sft_loss, CapConfig, DpoConfig};
use bdlm_core::mask::{build_bdlm_mask, build_mdlm_mask, decode_mask, PackedLayout};
use bdlm_core::model::{bdlm_masks, forward_mdlm, forward_train, mdlm_masks, DenoiserParams, ModelConfig, StabilizerConfig};
use bdlm_core::noising::{complementary_pair, sample_noised, sample_noised_at, NoiseSchedule, NoisedBatch};
use bdlm_core::optim::{AdamW, AdamWConfig};
use bdlm_core::packing::{pack_documents, pack_pairs, PackedBatch};
use bdlm_core::rng::{derive_seed, rng, Rng};
use bdlm_core::vocab::{Token, EOS, MASK, PAD, VOCAB_SIZE};
use rand::Rng as _;
use serde::Serialize;
use serde_json::{json, Value};

/// Outcome of one oracle over many cases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// First failing case, with what is needed to replay it.
    pub counterexample: Option<Value>,
}

impl OracleReport {
    fn new(name: &str, tolerance: f64) -> Self {
        OracleReport {
            name: name.into(),
            cases: 0,
            max_deviation: 0.0,
            tolerance,
            passed: true,
            counterexample: None,
        }
    }

    /// Records one case; deviations above the tolerance (or NaN) fail.
    fn record(&mut self, deviation: f64, witness: impl FnOnce() -> Value) {
        self.cases += 1;
        if deviation.is_nan() || deviation > self.max_deviation {
            self.max_deviation = if deviation.is_nan() { f64::INFINITY } else { deviation };
        }
        if !(deviation <= self.tolerance) && self.passed {
            self.passed = false;
            self.counterexample = Some(witness());
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

// ---------------------------------------------------------------------------
// masks

/// All compositions of `n` into ordered positive parts.
fn compositions(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    (0..1usize << (n - 1))
        .map(|cuts| {
            let mut parts = Vec::new();
            let mut len = 1;
            for bit in 0..n - 1 {
                if cuts >> bit & 1 == 1 {
                    parts.push(len);
                    len = 1;
                } else {
                    len += 1;
                }
            }
            parts.push(len);
            parts
        })
        .collect()
}

fn spans_of(parts: &[usize]) -> Vec<(usize, usize)> {
    let mut s = 0;
    parts
        .iter()
        .map(|&p| {
            s += p;
            (s - p, s)
        })
        .collect()
}

/// The four-quadrant block-diffusion rule for an entry of the `2L x 2L` mask.
fn piecewise_bdlm(l: usize, doc: &[usize], block: &[usize], i: usize, j: usize) -> bool {
    let (a, b) = (i % l, j % l);
    if doc[a] != doc[b] {
        return false;
    }
    match (i < l, j < l) {
        (true, true) => block[a] == block[b],
        (true, false) => block[a] > block[b],
        (false, true) => false,
        (false, false) => block[a] >= block[b],
    }
}

/// Document and block ids from spans, prompts forming their own block.
fn oracle_ids(l: usize, spans: &[(usize, usize)], prompts: &[usize], lb: usize) -> (Vec<usize>, Vec<usize>) {
    let mut doc = vec![usize::MAX; l];
    let mut block = vec![usize::MAX; l];
    for (d, (&(s, e), &p)) in spans.iter().zip(prompts).enumerate() {
        for k in s..e {
            doc[k] = d;
            block[k] = match p {
                0 => k / lb,
                _ if k < s + p => 0,
                _ => 1 + (k - s - p) / lb,
            };
        }
    }
    (doc, block)
}

/// Exhaustive check of the block-diffusion and masked-diffusion masks for
/// every length up to `max_len`, every dividing block size and every
/// document partition.
pub fn mask_oracle(max_len: usize) -> OracleReport {
    let mut rep = OracleReport::new("mask_oracle", 0.0);
    for l in 1..=max_len {
        for parts in compositions(l) {
            let spans = spans_of(&parts);
            let prompts = vec![0; spans.len()];
            for lb in (1..=l).filter(|b| l % b == 0) {
                let layout = PackedLayout::new(l, spans.clone(), lb).expect("valid layout");
                let (doc, block) = oracle_ids(l, &spans, &prompts, lb);
                let m = build_bdlm_mask(&layout);
                let md = build_mdlm_mask(&layout);
                let mut wrong = 0usize;
                let mut first = None;
                for i in 0..2 * l {
                    for j in 0..2 * l {
                        if m.allowed(i, j) != piecewise_bdlm(l, &doc, &block, i, j) {
                            wrong += 1;
                            first.get_or_insert((i, j));
                        }
                    }
                }
                for i in 0..l {
                    for j in 0..l {
                        if md.allowed(i, j) != (doc[i] == doc[j]) {
                            wrong += 1;
                            first.get_or_insert((i, j));
                        }
                    }
                }
                rep.record(wrong as f64, || {
                    json!({ "seq_len": l, "block_size": lb, "doc_lengths": parts, "entry": first })
                });
            }
        }
    }
    rep
}

/// Decode masks against their definition: the prompt is bidirectional,
/// finalized positions are block-causal, the active block sees everything.
pub fn decode_mask_oracle(max_prompt: usize, max_blocks: usize, max_block: usize) -> OracleReport {
    let mut rep = OracleReport::new("decode_mask_oracle", 0.0);
    for p in 1..=max_prompt {
        for lb in 1..=max_block {
            for nb in 0..=max_blocks {
                for active in 1..=lb {
                    let fin = nb * lb;
                    let m = decode_mask(p, fin, lb, active);
                    let group = |k: usize| if k < p { 0 } else if k < p + fin { 1 + (k - p) / lb } else { usize::MAX };
                    let mut wrong = 0;
                    for i in 0..p + fin + active {
                        for j in 0..p + fin + active {
                            let want = if group(i) == usize::MAX { true } else { group(j) <= group(i) };
                            wrong += usize::from(m.allowed(i, j) != want);
                        }
                    }
                    rep.record(wrong as f64, || json!({ "prompt": p, "block_size": lb, "finalized_blocks": nb, "active": active }));
                }
            }
        }
    }
    rep
}

// ---------------------------------------------------------------------------
// scalar-loop transformer

struct Weights<'a> {
    p: &'a DenoiserParams<f64>,
}

impl Weights<'_> {
    fn t(&self, name: &str) -> &[f64] {
        self.p.get(name).unwrap_or_else(|| panic!("missing tensor {name}")).data()
    }
}

fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// `x[1 x n] * w[n x m]`.
fn vecmat(x: &[f64], w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (k, &xk) in x.iter().enumerate() {
        for j in 0..m {
            out[j] += xk * w[k * m + j];
        }
    }
    out
}

fn rotate(x: &mut [f64], pos: usize, heads: usize, base: f64) {
    let hd = x.len() / heads;
    for h in 0..heads {
        for i in 0..hd / 2 {
            let angle = pos as f64 * base.powf(-(2.0 * i as f64) / hd as f64);
            let (c, s) = (angle.cos(), angle.sin());
            let (a, b) = (x[h * hd + 2 * i], x[h * hd + 2 * i + 1]);
            x[h * hd + 2 * i] = a * c - b * s;
            x[h * hd + 2 * i + 1] = a * s + b * c;
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Logits at every position of `tokens` under the attention rule `allowed`.
pub fn naive_logits(
    params: &DenoiserParams<f64>,
    tokens: &[Token],
    positions: &[usize],
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let cfg = *params.config();
    let w = Weights { p: params };
    let (d, n, heads) = (cfg.d_model, tokens.len(), cfg.n_heads);
    let hd = d / heads;
    let emb = w.t("tok_emb");
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| emb[t * d..(t + 1) * d].to_vec()).collect();
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, w.t(&name("attn_norm")))).collect();
        let mut q: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, w.t(&name("wq")), d)).collect();
        let mut k: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, w.t(&name("wk")), d)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, w.t(&name("wv")), d)).collect();
        for i in 0..n {
            rotate(&mut q[i], positions[i], heads, cfg.rope_base);
            rotate(&mut k[i], positions[i], heads, cfg.rope_base);
        }
        let mut att = vec![vec![0.0; d]; n];
        for i in 0..n {
            for hh in 0..heads {
                let cols = hh * hd..(hh + 1) * hd;
                let keys: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (&j, s) in keys.iter().zip(&scores) {
                    let pr = (s - mx).exp() / z;
                    for c in cols.clone() {
                        att[i][c] += pr * v[j][c];
                    }
                }
            }
        }
        for i in 0..n {
            let o = vecmat(&att[i], w.t(&name("wo")), d);
            x[i].iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h2 = rms(&x[i], w.t(&name("ffn_norm")));
            let f: Vec<f64> = vecmat(&h2, w.t(&name("w1")), cfg.d_ff).into_iter().map(gelu).collect();
            let f2 = vecmat(&f, w.t(&name("w2")), d);
            x[i].iter_mut().zip(&f2).for_each(|(a, b)| *a += b);
        }
    }
    x.iter()
        .map(|r| {
            let h = rms(r, w.t("final_norm"));
            (0..cfg.vocab).map(|t| (0..d).map(|c| h[c] * emb[t * d + c]).sum()).collect()
        })
        .collect()
}

fn nll(logits: &[f64], target: Token) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    mx + z.ln() - logits[target]
}

/// Weighted masked cross-entropy of a noised batch computed by loops:
/// the block-diffusion forward over `[x_t; x_0]` when `two_stream`, the
/// single-stream document forward otherwise.
pub fn scalar_loss(params: &DenoiserParams<f64>, nb: &NoisedBatch, two_stream: bool) -> f64 {
    let mut total = 0.0;
    for r in 0..nb.rows() {
        if !nb.is_masked[r].iter().any(|&m| m) {
            continue;
        }
        let layout = &nb.layouts[r];
        let l = nb.row_len();
        let (doc, block) = oracle_ids(l, layout.doc_spans(), layout.prompt_lens(), layout.block_size());
        let logits = if two_stream {
            let mut toks = nb.noisy[r].clone();
            toks.extend_from_slice(&nb.clean[r]);
            let pos: Vec<usize> = (0..2 * l).map(|k| k % l).collect();
            naive_logits(params, &toks, &pos, &|i, j| piecewise_bdlm(l, &doc, &block, i, j))
        } else {
            let pos: Vec<usize> = (0..l).collect();
            naive_logits(params, &nb.noisy[r], &pos, &|i, j| doc[i] == doc[j])
        };
        for k in 0..l {
            if nb.is_masked[r][k] {
                total += nb.weight[r] * nll(&logits[k], nb.clean[r][k]);
            }
        }
    }
    total / nb.supervised_tokens() as f64
}

// ---------------------------------------------------------------------------
// random instances

/// A d=16 model with weights large enough to give non-uniform predictions.
pub fn toy_model(seed: u64) -> DenoiserParams<f64> {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 64,
        ..ModelConfig::default()
    };
    let mut p = DenoiserParams::<f64>::init(cfg, seed).expect("valid toy config");
    let mut r = rng(derive_seed(seed, 0x746f79, 0));
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = if *v == 1.0 { 1.0 + r.random_range(-0.3..0.3) } else { *v * 10.0 };
        }
    }
    p
}

fn random_bytes(r: &mut Rng, len: std::ops::Range<usize>) -> Vec<Token> {
    let n = r.random_range(len);
    (0..n).map(|_| r.random_range(97..107)).collect()
}

fn pick(r: &mut Rng, options: &[usize]) -> usize {
    options[r.random_range(0..options.len())]
}

/// Documents of random lengths packed into rows of `l` at block size `lb`.
fn random_doc_batch(r: &mut Rng, l: usize, lb: usize) -> PackedBatch {
    let n_docs = r.random_range(1..=3);
    let docs: Vec<Vec<Token>> = (0..n_docs)
        .map(|_| {
            random_bytes(r, 1..l + 1)
        })
        .collect();
    pack_documents(&docs, l, lb).expect("docs fit")
}

fn random_pair_batch(r: &mut Rng, l: usize, lb: usize) -> PackedBatch {
    let n = r.random_range(1..=2);
    let pairs: Vec<(Vec<Token>, Vec<Token>)> = (0..n)
        .map(|_| {
            let mut resp = random_bytes(r, 0..lb.min(6));
            resp.push(EOS);
            (random_bytes(r, 1..5), resp)
        })
        .collect();
    pack_pairs(pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())), l, lb).expect("pairs fit")
}

fn divisors(l: usize) -> Vec<usize> {
    (1..=l).filter(|b| l % b == 0).collect()
}

/// Loss-reduction oracle: library losses against the scalar-loop forward and
/// loss, over `instances` random cases per objective.
pub fn loss_oracle(instances: usize, seed: u64) -> Vec<OracleReport> {
    let schedule = NoiseSchedule::default();
    let mut bd = OracleReport::new("loss_oracle/bdlm", 1e-6);
    let mut md = OracleReport::new("loss_oracle/mdlm", 1e-6);
    let mut sf = OracleReport::new("loss_oracle/sft", 1e-6);
    let mut ar = OracleReport::new("loss_oracle/full_mask_block1", 1e-6);
    let mut k1 = OracleReport::new("loss_oracle/bdlm_k1_equals_mdlm", 0.0);
    for case in 0..instances {
        let s = derive_seed(seed, 0x6c6f7373, case as u64);
        let mut r = rng(s);
        let params = toy_model(s);
        let l = [4, 6, 8, 12][r.random_range(0..4)];
        let lbs = divisors(l);
        let lb = lbs[r.random_range(0..lbs.len())];
        let witness = |obj: &'static str| move || json!({ "seed": seed, "case": case, "objective": obj });

        let batch = random_doc_batch(&mut r, l, lb);
        let nb = sample_noised(&batch, &schedule, r.random()).expect("noise");
        let lib = library_loss(&params, &nb, LossKind::Bdlm);
        if let Some(v) = lib {
            bd.record((v - scalar_loss(&params, &nb, true)).abs(), witness("bdlm"));
        }

        let full = batch.with_block_size(l).expect("reblock");
        let nbf = sample_noised(&full, &schedule, r.random()).expect("noise");
        if let (Some(a), Some(b)) = (library_loss(&params, &nbf, LossKind::Bdlm), library_loss(&params, &nbf, LossKind::Mdlm)) {
            md.record((b - scalar_loss(&params, &nbf, false)).abs(), witness("mdlm"));
            k1.record((a - b).abs(), witness("k1"));
        }

        let one = batch.with_block_size(1).expect("reblock");
        let nb1 = sample_noised_at(&one, &vec![1.0; one.rows()], r.random()).expect("noise");
        if let Some(v) = library_loss(&params, &nb1, LossKind::Bdlm) {
            ar.record((v - per_token_loop(&params, &one)).abs(), witness("full_mask_block1"));
        }

        let pb = { let lb = pick(&mut r, &[1, 2, 4]); random_pair_batch(&mut r, 16, lb) };
        let nbp = sample_noised(&pb, &schedule, r.random()).expect("noise");
        if let Some(v) = library_loss(&params, &nbp, LossKind::Sft) {
            sf.record((v - scalar_loss(&params, &nbp, true)).abs(), witness("sft"));
        }
    }
    vec![bd, md, sf, ar, k1]
}

/// Next-token loss by explicit per-position prefix forwards: position `k` is
/// predicted from a MASK query that sees the clean prefix of its document.
fn per_token_loop(params: &DenoiserParams<f64>, batch: &PackedBatch) -> f64 {
    let mut total = 0.0;
    for r in 0..batch.rows() {
        for &(s, e) in batch.layouts[r].doc_spans() {
            for k in s..e {
                if !batch.loss_mask[r][k] {
                    continue;
                }
                let mut toks = vec![MASK];
                toks.extend_from_slice(&batch.tokens[r][s..k]);
                let mut pos = vec![k];
                pos.extend(s..k);
                let logits = naive_logits(params, &toks, &pos, &|i, j| i == 0 || (j >= 1 && j <= i));
                total += nll(&logits[0], batch.tokens[r][k]);
            }
        }
    }
    total / batch.supervised_tokens() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Bdlm,
    Mdlm,
    Sft,
}

fn library_loss(params: &DenoiserParams<f64>, nb: &NoisedBatch, kind: LossKind) -> Option<f64> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let cfg = params.config();
    let loss = match kind {
        LossKind::Mdlm => {
            let lg = forward_mdlm(&mut g, &bound, cfg, nb, &mdlm_masks(nb)).expect("forward");
            mdlm_loss(&mut g, &lg, nb)
        }
        _ => {
            let lg = forward_train(&mut g, &bound, cfg, nb, &bdlm_masks(nb), &StabilizerConfig::off(), 0, 0).expect("forward");
            if kind == LossKind::Sft {
                sft_loss(&mut g, &lg, nb)
            } else {
                bdlm_loss(&mut g, &lg, nb)
            }
        }
    };
    loss.expect("loss").map(|l| l.report.value)
}

// ---------------------------------------------------------------------------
// gradients

/// Objectives covered by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GradObjective {
    Ar,
    Bdlm,
    Mdlm,
    Sft,
    Cap,
    Dpo,
}

impl GradObjective {
    pub const ALL: [GradObjective; 6] = [
        GradObjective::Ar,
        GradObjective::Bdlm,
        GradObjective::Mdlm,
        GradObjective::Sft,
        GradObjective::Cap,
        GradObjective::Dpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradObjective::Ar => "ar",
            GradObjective::Bdlm => "bdlm",
            GradObjective::Mdlm => "mdlm",
            GradObjective::Sft => "sft",
            GradObjective::Cap => "cap",
            GradObjective::Dpo => "dpo",
        }
    }
}

/// A fixed objective instance: the loss is a deterministic function of the
/// parameters.
struct GradCase {
    objective: GradObjective,
    noised: Option<NoisedBatch>,
    reference: Option<DenoiserParams<f64>>,
    pair: Option<(Vec<Token>, Vec<Token>, Vec<Token>, usize)>,
    draws: Option<(Vec<bdlm_core::losses::NoiseDraw>, Vec<bdlm_core::losses::NoiseDraw>)>,
}

impl GradCase {
    fn build(objective: GradObjective, params: &DenoiserParams<f64>, r: &mut Rng) -> Option<Self> {
        let schedule = NoiseSchedule::default();
        let mut case = GradCase {
            objective,
            noised: None,
            reference: None,
            pair: None,
            draws: None,
        };
        let l = [4, 8][r.random_range(0..2)];
        match objective {
            GradObjective::Ar => {
                let b = random_doc_batch(r, l, 1);
                case.noised = Some(sample_noised_at(&b, &vec![1.0; b.rows()], r.random()).ok()?);
            }
            GradObjective::Bdlm => {
                let b = { let lb = pick(r, &[1, 2, 4]); random_doc_batch(r, l, lb) };
                case.noised = Some(sample_noised(&b, &schedule, r.random()).ok()?);
            }
            GradObjective::Mdlm => {
                let b = random_doc_batch(r, l, l);
                case.noised = Some(sample_noised(&b, &schedule, r.random()).ok()?);
            }
            GradObjective::Sft | GradObjective::Cap => {
                let b = { let lb = pick(r, &[2, 4]); random_pair_batch(r, 16, lb) };
                let (first, second) = complementary_pair(&b, r.random_range(0.2..0.8), r.random()).ok()?;
                case.noised = Some(if r.random_bool(0.5) { first } else { second });
            }
            GradObjective::Dpo => {
                let mut reference = params.clone();
                for t in reference.tensors_mut() {
                    for v in t.data_mut() {
                        *v += r.random_range(-0.02..0.02);
                    }
                }
                let lb = [2, 4][r.random_range(0..2)];
                let prompt = random_bytes(r, 1..5);
                let mut chosen = random_bytes(r, 0..lb);
                chosen.push(EOS);
                let mut rejected = random_bytes(r, 0..lb);
                rejected.push(EOS);
                let cfg = DpoConfig {
                    mc_samples: 2,
                    ..DpoConfig::default()
                };
                case.draws = Some(dpo_draws(r, chosen.len(), rejected.len(), &schedule, &cfg));
                case.pair = Some((prompt, chosen, rejected, lb));
                case.reference = Some(reference);
            }
        }
        if let Some(nb) = &case.noised {
            if nb.masked_count() == 0 {
                return None;
            }
        }
        Some(case)
    }

    /// Loss value and, when `grad`, the gradient of every tensor.
    fn eval(&self, params: &DenoiserParams<f64>, grad: bool) -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, grad);
        let cfg = params.config();
        let var = match self.objective {
            GradObjective::Dpo => {
                let (p, c, rj, lb) = self.pair.as_ref().expect("dpo pair");
                let (dw, dl) = self.draws.as_ref().expect("dpo draws");
                let dcfg = DpoConfig {
                    mc_samples: dw.len(),
                    ..DpoConfig::default()
                };
                dpo_objective(&mut g, &bound, params, self.reference.as_ref().expect("reference"), p, c, rj, *lb, (dw, dl), &dcfg)
                    .expect("dpo")
                    .var
            }
            obj => {
                let nb = self.noised.as_ref().expect("batch");
                let loss = if obj == GradObjective::Mdlm {
                    let lg = forward_mdlm(&mut g, &bound, cfg, nb, &mdlm_masks(nb)).expect("forward");
                    mdlm_loss(&mut g, &lg, nb)
                } else {
                    let lg = forward_train(&mut g, &bound, cfg, nb, &bdlm_masks(nb), &StabilizerConfig::off(), 0, 0).expect("forward");
                    match obj {
                        GradObjective::Sft => sft_loss(&mut g, &lg, nb),
                        GradObjective::Cap => cap_objective(&mut g, &lg, nb, &CapConfig { lambda: 0.7 }),
                        _ => bdlm_loss(&mut g, &lg, nb),
                    }
                };
                loss.expect("loss").expect("masked tokens").var
            }
        };
        let value = g.scalar_value(var);
        if !grad {
            return (value, Vec::new());
        }
        g.backward(var).expect("backward");
        let grads = bound
            .vars()
            .iter()
            .zip(params.tensors())
            .map(|(&v, (_, t))| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    }
}

fn shifted(params: &DenoiserParams<f64>, dir: &[Vec<f64>], h: f64) -> DenoiserParams<f64> {
    let mut p = params.clone();
    for (t, d) in p.tensors_mut().zip(dir) {
        for (v, dv) in t.data_mut().iter_mut().zip(d) {
            *v += h * dv;
        }
    }
    p
}

/// Relative disagreement `|fd - an| / max(|fd|, |an|, 1e-6)`.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

/// Central finite differences (`h = 1e-5`) against the analytic gradient:
/// one random direction plus the three largest coordinates of a random
/// sample of 32 coordinates per instance.
pub fn gradcheck(objective: GradObjective, instances: usize, seed: u64) -> OracleReport {
    const H: f64 = 1e-5;
    let mut rep = OracleReport::new(&format!("gradcheck/{}", objective.name()), 1e-4);
    let mut case = 0u64;
    while rep.cases < instances {
        let s = derive_seed(seed, 0x67726164 + objective as u64, case);
        case += 1;
        let mut r = rng(s);
        let params = toy_model(s);
        let Some(inst) = GradCase::build(objective, &params, &mut r) else {
            continue;
        };
        let (_, grads) = inst.eval(&params, true);
        let dir: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let an: f64 = grads.iter().flatten().zip(dir.iter().flatten()).map(|(a, b)| a * b).sum();
        let fd = (inst.eval(&shifted(&params, &dir, H), false).0 - inst.eval(&shifted(&params, &dir, -H), false).0) / (2.0 * H);
        let mut worst = rel_err(fd, an);
        let flat: Vec<(usize, usize)> = grads.iter().enumerate().flat_map(|(ti, g)| (0..g.len()).map(move |j| (ti, j))).collect();
        let mut sample: Vec<(usize, usize)> = (0..32).map(|_| flat[r.random_range(0..flat.len())]).collect();
        sample.sort_by(|a, b| grads[b.0][b.1].abs().total_cmp(&grads[a.0][a.1].abs()));
        for &(ti, j) in sample.iter().take(3) {
            let mut e: Vec<Vec<f64>> = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            e[ti][j] = 1.0;
            let fd = (inst.eval(&shifted(&params, &e, H), false).0 - inst.eval(&shifted(&params, &e, -H), false).0) / (2.0 * H);
            worst = worst.max(rel_err(fd, grads[ti][j]));
        }
        let c = case - 1;
        rep.record(worst, || json!({ "seed": seed, "case": c, "objective": objective.name() }));
    }
    rep
}

// ---------------------------------------------------------------------------
// preference identity

/// `dpo_loss == ln 2` bitwise when the policy is its own reference, and one
/// optimizer step raises the chosen-minus-rejected margin.
pub fn dpo_identity(instances: usize, seed: u64) -> Vec<OracleReport> {
    let mut ident = OracleReport::new("dpo/ln2_identity", 0.0);
    let mut margin = OracleReport::new("dpo/one_step_margin", 0.0);
    for case in 0..instances {
        let s = derive_seed(seed, 0x64706f, case as u64);
        let mut r = rng(s);
        let params = toy_model(s);
        let prompt = random_bytes(&mut r, 3..4);
        let chosen = vec![b'a' as Token, b'b' as Token, EOS];
        let rejected = vec![b'c' as Token, EOS];
        let cfg = DpoConfig::default();
        let draws = dpo_draws(&mut r, 3, 2, &NoiseSchedule::default(), &cfg);
        let run = |policy: &DenoiserParams<f64>, reference: &DenoiserParams<f64>| {
            let mut g = Graph::new();
            let bound = policy.bind(&mut g, true);
            let loss = dpo_objective(&mut g, &bound, policy, reference, &prompt, &chosen, &rejected, 2, (&draws.0, &draws.1), &cfg)
                .expect("dpo");
            (g, bound, loss)
        };
        let (g, bound, loss) = run(&params, &params);
        let w = json!({ "seed": seed, "case": case });
        ident.record(if loss.report.value.to_bits() == LN_2.to_bits() { 0.0 } else { (loss.report.value - LN_2).abs().max(f64::MIN_POSITIVE) }, || w.clone());
        let mut g = g;
        g.backward(loss.var).expect("backward");
        let mut policy = params.clone();
        policy.absorb_grads(&g, &bound).expect("grads");
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &policy,
        )
        .expect("optimizer");
        opt.step(&mut policy, 1e-3).expect("step");
        let (_, _, after) = run(&policy, &params);
        let m = after.report.extra("margin").expect("margin");
        margin.record(if m > 0.0 { 0.0 } else { 1.0 }, || json!({ "seed": seed, "case": case, "margin": m }));
    }
    vec![ident, margin]
}

// ---------------------------------------------------------------------------
// complementary masks

/// The two complementary masks are disjoint and cover exactly the
/// supervised (non-PAD response) positions.
pub fn complementary_oracle(batches: usize, seed: u64) -> OracleReport {
    let mut rep = OracleReport::new("complementary_partition", 0.0);
    for case in 0..batches {
        let s = derive_seed(seed, 0x636f6d70, case as u64);
        let mut r = rng(s);
        let b = { let lb = pick(&mut r, &[1, 2, 4, 8]); random_pair_batch(&mut r, 32, lb) };
        let t = r.random_range(0.05..0.95);
        let (a, c) = match complementary_pair(&b, t, r.random()) {
            Ok(x) => x,
            Err(_) => {
                rep.cases += 1;
                continue;
            }
        };
        let mut bad = 0;
        for row in 0..b.rows() {
            let (prompt_flags, _) = (b.layouts[row].prompt_flags(), ());
            for k in 0..b.row_len() {
                let want = b.tokens[row][k] != PAD && !prompt_flags[k];
                let (x, y) = (a.is_masked[row][k], c.is_masked[row][k]);
                bad += usize::from((x && y) || ((x || y) != want));
            }
        }
        rep.record(bad as f64, || json!({ "seed": seed, "case": case }));
    }
    rep
}

// ---------------------------------------------------------------------------
// decoding

/// Decoder contracts on random small models: sequential limit, acceptance
/// monotonicity, cache equivalence and exact throughput accounting.
pub fn decoder_oracle(instances: usize, seed: u64) -> Vec<OracleReport> {
    let mut seq = OracleReport::new("decode/threshold_one_accepts_one", 0.0);
    let mut mono = OracleReport::new("decode/acceptance_monotone", 0.0);
    let mut cache = OracleReport::new("decode/cache_equivalence", 1e-5);
    let mut tpf = OracleReport::new("decode/tpf_accounting", 0.0);
    for case in 0..instances {
        let s = derive_seed(seed, 0x6465636f, case as u64);
        let mut r = rng(s);
        let w = || json!({ "seed": seed, "case": case });
        let p64 = toy_model(s);
        let params: DenoiserParams<f32> = p64.cast();
        let prompt = random_bytes(&mut r, 1..6);
        let cfg = DecodeConfig {
            block_size: [1, 2, 4, 8][r.random_range(0..4)],
            threshold: r.random_range(0.05..1.0),
            fallback_count: r.random_range(1..3),
            max_new_tokens: r.random_range(0..20),
            ..DecodeConfig::default()
        };
        let strict = DecodeConfig { threshold: 1.0, fallback_count: 1, ..cfg };
        let out = generate(&params, &prompt, &strict).expect("decode");
        let extra = out.metrics.accepted_history.iter().filter(|&&a| a != 1).count();
        seq.record(extra as f64, w);

        let rep = decode_with_and_without_cache(&params, &prompt, &cfg).expect("decode");
        let dev = if rep.tokens_equal && rep.forward_passes.0 == rep.forward_passes.1 { rep.max_logit_divergence } else { f64::INFINITY };
        cache.record(dev, w);

        let out = generate(&params, &prompt, &cfg).expect("decode");
        let m = &out.metrics;
        let ok = m.accepted_history.iter().sum::<usize>() == m.generated_tokens
            && m.accepted_history.len() == m.forward_passes
            && if m.forward_passes == 0 { m.tpf == 0.0 } else { m.tpf == m.generated_tokens as f64 / m.forward_passes as f64 && m.tpf >= 1.0 };
        tpf.record(if ok { 0.0 } else { 1.0 }, w);

        let conf: Vec<f64> = (0..r.random_range(1..12)).map(|_| r.random::<f64>()).collect();
        let (mut t1, mut t2) = (r.random::<f64>(), r.random::<f64>());
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        let fb = r.random_range(1..4);
        let lo = select_accepted(&conf, t1, fb);
        let hi = select_accepted(&conf, t2, fb);
        let subset = hi.iter().all(|i| lo.contains(i));
        mono.record(if subset { 0.0 } else { 1.0 }, w);
    }
    vec![seq, mono, cache, tpf]
}

/// The attention mask is respected: perturbing a token a query may not see
/// leaves that query's logits bitwise unchanged.
pub fn mask_respect_oracle(instances: usize, seed: u64) -> OracleReport {
    let mut rep = OracleReport::new("attention_respects_mask", 0.0);
    for case in 0..instances {
        let s = derive_seed(seed, 0x72657370, case as u64);
        let mut r = rng(s);
        let params = toy_model(s);
        let l = 8;
        let lb = [1, 2, 4, 8][r.random_range(0..4)];
        let batch = random_doc_batch(&mut r, l, lb);
        let nb = sample_noised(&batch, &NoiseSchedule::default(), r.random()).expect("noise");
        let row = 0;
        let layout = &nb.layouts[row];
        let m = build_bdlm_mask(layout);
        let mut tokens = nb.noisy[row].clone();
        tokens.extend_from_slice(&nb.clean[row]);
        let all: Vec<usize> = (0..2 * l).collect();
        let base = bdlm_core::model::forward_logits(&params, &tokens, &m, &all).expect("forward");
        let j = r.random_range(0..2 * l);
        let mut changed = tokens.clone();
        changed[j] = if changed[j] == b'z' as Token { b'y' as Token } else { b'z' as Token };
        let after = bdlm_core::model::forward_logits(&params, &changed, &m, &all).expect("forward");
        let mut dev = 0.0f64;
        for i in (0..2 * l).filter(|&i| i != j && !m.allowed(i, j)) {
            // a query is unaffected unless some key it sees can see `j`
            let reach = (0..2 * l).any(|k| m.allowed(i, k) && (k == j || m.allowed(k, j)));
            if reach {
                continue;
            }
            for v in 0..VOCAB_SIZE {
                dev = dev.max((base[i * VOCAB_SIZE + v] - after[i * VOCAB_SIZE + v]).abs());
            }
        }
        rep.record(dev, || json!({ "seed": seed, "case": case, "perturbed": j }));
    }
    rep
}

/// Every oracle at its acceptance scale.
pub fn run_all(seed: u64) -> Vec<OracleReport> {
    let mut out = vec![mask_oracle(12), decode_mask_oracle(4, 3, 4)];
    out.extend(loss_oracle(100, seed));
    for obj in GradObjective::ALL {
        out.push(gradcheck(obj, 100, seed));
    }
    out.extend(dpo_identity(10, seed));
    out.push(complementary_oracle(10_000, seed));
    out.extend(decoder_oracle(50, seed));
    out.push(mask_respect_oracle(50, seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compositions_enumerate_all_partitions() {
        assert_eq!(compositions(4).len(), 8);
        assert!(compositions(4).iter().all(|c| c.iter().sum::<usize>() == 4));
    }

    #[test]
    fn small_mask_oracle_passes() {
        let r = mask_oracle(4);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.cases, 1 + 2 * 2 + 4 * 2 + 8 * 3);
    }

    #[test]
    fn naive_forward_matches_uniform_limit() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_len: 8,
            ..ModelConfig::default()
        };
        let mut p = DenoiserParams::<f64>::init(cfg, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let lg = naive_logits(&p, &[1, 2, 3], &[0, 1, 2], &|_, _| true);
        let v = nll(&lg[0], 5);
        assert!((v - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn failing_report_keeps_first_witness() {
        let mut r = OracleReport::new("x", 0.5);
        r.record(0.1, || json!(0));
        r.record(0.9, || json!(1));
        r.record(2.0, || json!(2));
        assert!(!r.passed);
        assert_eq!(r.counterexample, Some(json!(1)));
        assert_eq!(r.max_deviation, 2.0);
    }
}
