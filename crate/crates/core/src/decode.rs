//! Threshold-based parallel block decoding.
//!
//! Blocks are generated left to right. Within the active block every refine
//! step runs one forward pass, proposes a token for each unfilled position
//! and accepts those whose confidence exceeds the threshold, topping up with
//! the most confident remaining candidates when fewer than `fallback_count`
//! qualify. Filled positions are never rewritten. MASK and PAD are never
//! proposed.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use crate::error::{contract, Error, Result};
use crate::mask::decode_mask;
use crate::model::{forward_chunk, forward_logits, DenoiserParams, KvCache};
use crate::real::Real;
use crate::rng::{rng, Rng};
use crate::vocab::{truncate_after_eos, Token, EOS, MASK, PAD};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub block_size: usize,
    pub threshold: f64,
    pub fallback_count: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub use_cache: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            block_size: 32,
            threshold: 0.95,
            fallback_count: 1,
            temperature: 0.0,
            max_new_tokens: 64,
            seed: 0,
            use_cache: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(alloc::format!("threshold must lie in (0, 1], got {}", self.threshold)));
        }
        if self.fallback_count == 0 || self.block_size == 0 {
            return Err(Error::Config("fallback_count and block_size must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A proposal for one unfilled position of the active block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub slot: usize,
    pub token: Token,
    pub confidence: f64,
}

/// Indices into `confidences` accepted at `threshold`: every value strictly
/// above it, topped up to `fallback` entries with the highest remaining
/// values (earlier index first on ties).
pub fn select_accepted(confidences: &[f64], threshold: f64, fallback: usize) -> Vec<usize> {
    let mut accepted: Vec<usize> = (0..confidences.len()).filter(|&i| confidences[i] > threshold).collect();
    if accepted.len() < fallback {
        let mut rest: Vec<usize> = (0..confidences.len()).filter(|&i| confidences[i] <= threshold).collect();
        rest.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
        accepted.extend(rest.into_iter().take(fallback - accepted.len()));
        accepted.sort_unstable();
    }
    accepted
}

/// Softmax over `logits` with `banned` tokens removed.
fn probabilities(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scale = if temperature > 0.0 { 1.0 / temperature } else { 1.0 };
    let banned = |j: usize| j == MASK || j == PAD;
    let m = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| !banned(j))
        .fold(f64::NEG_INFINITY, |a, (_, &z)| a.max(z * scale));
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &z)| if banned(j) { 0.0 } else { Float::exp(z * scale - m) })
        .collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Candidate for one position: the argmax (lowest id on ties) at
/// temperature 0, otherwise a draw from the tempered distribution. The
/// confidence is the probability of the chosen token under the distribution
/// it was chosen from.
pub fn propose(logits: &[f64], slot: usize, temperature: f64, rng: &mut Rng) -> Candidate {
    let p = probabilities(logits, temperature);
    let token = if temperature > 0.0 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (j, &pj) in p.iter().enumerate() {
            acc += pj;
            if pj > 0.0 && u < acc {
                pick = Some(j);
                break;
            }
        }
        pick.unwrap_or_else(|| p.iter().rposition(|&x| x > 0.0).expect("a permitted token"))
    } else {
        let mut best = 0;
        for j in 0..p.len() {
            if p[j] > p[best] {
                best = j;
            }
        }
        best
    };
    Candidate {
        slot,
        token,
        confidence: p[token],
    }
}

/// Generation in progress.
#[derive(Debug, Clone)]
pub struct DecodeState<T: Real> {
    pub prompt: Vec<Token>,
    pub finalized: Vec<Token>,
    pub block: Vec<Token>,
    pub filled: Vec<bool>,
    pub forward_passes: usize,
    pub accepted_history: Vec<usize>,
    pub steps_per_block: Vec<usize>,
    cache: Option<KvCache<T>>,
    /// Finalized content whose keys and values are not yet cached.
    pending: Vec<Token>,
    block_size: usize,
    rng: Rng,
    trace: Option<Vec<Vec<f64>>>,
}

impl<T: Real> DecodeState<T> {
    pub fn new(params: &DenoiserParams<T>, prompt: &[Token], cfg: &DecodeConfig) -> Result<Self> {
        cfg.validate()?;
        if prompt.is_empty() {
            return Err(contract("prompt must be non-empty"));
        }
        let max_len = params.config().max_len;
        if prompt.len() + cfg.max_new_tokens > max_len {
            return Err(contract(alloc::format!(
                "prompt of {} plus {} new tokens exceeds max_len {max_len}",
                prompt.len(),
                cfg.max_new_tokens
            )));
        }
        Ok(DecodeState {
            prompt: prompt.to_vec(),
            finalized: Vec::new(),
            block: Vec::new(),
            filled: Vec::new(),
            forward_passes: 0,
            accepted_history: Vec::new(),
            steps_per_block: Vec::new(),
            cache: cfg.use_cache.then(|| KvCache::new(params.config())),
            pending: prompt.to_vec(),
            block_size: cfg.block_size,
            rng: rng(cfg.seed),
            trace: None,
        })
    }

    /// Records the logits of every refine step (for cache comparisons).
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> Option<&[Vec<f64>]> {
        self.trace.as_deref()
    }

    /// Opens a fresh all-MASK block of `len` positions.
    pub fn open_block(&mut self, len: usize) -> Result<()> {
        if self.filled.iter().any(|&f| !f) {
            return Err(contract("the active block is not complete"));
        }
        if len == 0 || len > self.block_size {
            return Err(contract("block length must lie in 1..=block_size"));
        }
        self.block = vec![MASK; len];
        self.filled = vec![false; len];
        self.steps_per_block.push(0);
        Ok(())
    }

    /// Moves the completed active block into the finalized prefix.
    pub fn finalize_block(&mut self) -> Result<()> {
        if self.block.is_empty() || self.filled.iter().any(|&f| !f) {
            return Err(contract("only a complete block can be finalized"));
        }
        if self.finalized.len() % self.block_size != 0 {
            return Err(contract("a partial block was already finalized"));
        }
        self.finalized.extend_from_slice(&self.block);
        if self.cache.is_some() {
            self.pending.extend_from_slice(&self.block);
        }
        self.block.clear();
        self.filled.clear();
        Ok(())
    }

    pub fn cache_len(&self) -> Option<usize> {
        self.cache.as_ref().map(KvCache::len)
    }

    pub fn unfilled(&self) -> Vec<usize> {
        (0..self.block.len()).filter(|&i| !self.filled[i]).collect()
    }
}

/// Logits for every unfilled position of the active block, one row per
/// position in slot order. Counts one forward pass.
pub fn forward_decode<T: Real>(params: &DenoiserParams<T>, state: &mut DecodeState<T>) -> Result<Vec<Vec<f64>>> {
    let unfilled = state.unfilled();
    if unfilled.is_empty() {
        return Err(contract("no unfilled position in the active block"));
    }
    let vocab = params.config().vocab;
    let all: Vec<T> = match state.cache.as_mut() {
        Some(cache) => {
            let expected = state.prompt.len() + state.finalized.len();
            if cache.len() + state.pending.len() != expected {
                return Err(Error::CacheDesync {
                    cached: cache.len() + state.pending.len(),
                    expected,
                });
            }
            let out = forward_chunk(params, cache, &state.pending, &state.block)?;
            state.pending.clear();
            out
        }
        None => {
            let mut tokens = state.prompt.clone();
            tokens.extend_from_slice(&state.finalized);
            let start = tokens.len();
            tokens.extend_from_slice(&state.block);
            let mask = decode_mask(state.prompt.len(), state.finalized.len(), state.block_size, state.block.len());
            let rows: Vec<usize> = (start..tokens.len()).collect();
            forward_logits(params, &tokens, &mask, &rows)?
        }
    };
    state.forward_passes += 1;
    Ok(unfilled
        .iter()
        .map(|&i| all[i * vocab..(i + 1) * vocab].iter().map(|x| x.as_f64()).collect())
        .collect())
}

/// One forward pass and one acceptance round. Returns the accepted candidates.
pub fn refine_step<T: Real>(params: &DenoiserParams<T>, state: &mut DecodeState<T>, cfg: &DecodeConfig) -> Result<Vec<Candidate>> {
    let unfilled = state.unfilled();
    let logits = forward_decode(params, state)?;
    if let Some(tr) = state.trace.as_mut() {
        tr.push(logits.iter().flatten().copied().collect());
    }
    let cands: Vec<Candidate> = logits
        .iter()
        .zip(&unfilled)
        .map(|(row, &slot)| propose(row, slot, cfg.temperature, &mut state.rng))
        .collect();
    let conf: Vec<f64> = cands.iter().map(|c| c.confidence).collect();
    let chosen: Vec<Candidate> = select_accepted(&conf, cfg.threshold, cfg.fallback_count)
        .into_iter()
        .map(|i| cands[i])
        .collect();
    for c in &chosen {
        debug_assert!(!state.filled[c.slot]);
        state.block[c.slot] = c.token;
        state.filled[c.slot] = true;
    }
    state.accepted_history.push(chosen.len());
    if let Some(s) = state.steps_per_block.last_mut() {
        *s += 1;
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeMetrics {
    pub generated_tokens: usize,
    pub forward_passes: usize,
    /// Generated tokens per forward pass; 0 when nothing was generated.
    pub tpf: f64,
    /// Tokens per wall-clock second; filled in by callers that own a clock.
    pub tps: f64,
    pub steps_per_block: Vec<usize>,
    pub accepted_history: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Generated tokens, truncated after the first EOS (inclusive).
    pub tokens: Vec<Token>,
    pub metrics: DecodeMetrics,
    pub trace: Option<Vec<Vec<f64>>>,
}

/// Decodes until an EOS is finalized or `max_new_tokens` are produced.
pub fn generate<T: Real>(params: &DenoiserParams<T>, prompt: &[Token], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    run(params, DecodeState::new(params, prompt, cfg)?, cfg)
}

/// As [`generate`], recording the logits of every refine step.
pub fn generate_traced<T: Real>(params: &DenoiserParams<T>, prompt: &[Token], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    run(params, DecodeState::new(params, prompt, cfg)?.with_trace(), cfg)
}

fn run<T: Real>(params: &DenoiserParams<T>, mut state: DecodeState<T>, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    while state.finalized.len() < cfg.max_new_tokens {
        let len = cfg.block_size.min(cfg.max_new_tokens - state.finalized.len());
        state.open_block(len)?;
        while !state.unfilled().is_empty() {
            refine_step(params, &mut state, cfg)?;
        }
        let has_eos = state.block.contains(&EOS);
        state.finalize_block()?;
        if has_eos {
            break;
        }
    }
    let generated = state.finalized.len();
    let tpf = if state.forward_passes == 0 {
        0.0
    } else {
        generated as f64 / state.forward_passes as f64
    };
    Ok(DecodeOutput {
        tokens: truncate_after_eos(&state.finalized).to_vec(),
        metrics: DecodeMetrics {
            generated_tokens: generated,
            forward_passes: state.forward_passes,
            tpf,
            tps: 0.0,
            steps_per_block: state.steps_per_block,
            accepted_history: state.accepted_history,
        },
        trace: state.trace,
    })
}

/// Outcome of decoding the same prompt with and without the KV cache.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheReport {
    pub tokens_equal: bool,
    pub max_logit_divergence: f64,
    pub forward_passes: (usize, usize),
}

pub fn decode_with_and_without_cache<T: Real>(params: &DenoiserParams<T>, prompt: &[Token], cfg: &DecodeConfig) -> Result<CacheReport> {
    let on = generate_traced(params, prompt, &DecodeConfig { use_cache: true, ..*cfg })?;
    let off = generate_traced(params, prompt, &DecodeConfig { use_cache: false, ..*cfg })?;
    let (a, b) = (on.trace.unwrap_or_default(), off.trace.unwrap_or_default());
    let mut div = if a.len() == b.len() { 0.0 } else { f64::INFINITY };
    for (x, y) in a.iter().zip(&b) {
        if x.len() != y.len() {
            div = f64::INFINITY;
            continue;
        }
        for (p, q) in x.iter().zip(y) {
            div = div.max((p - q).abs());
        }
    }
    Ok(CacheReport {
        tokens_equal: on.tokens == off.tokens,
        max_logit_divergence: div,
        forward_passes: (on.metrics.forward_passes, off.metrics.forward_passes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> DenoiserParams<f64> {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 96,
            ..ModelConfig::default()
        };
        DenoiserParams::init(cfg, 9).unwrap()
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(select_accepted(&[0.97, 0.96, 0.50], 0.95, 1), [0, 1]);
        assert_eq!(select_accepted(&[0.90, 0.80, 0.70], 0.95, 1), [0]);
        assert_eq!(select_accepted(&[0.99, 0.999, 1.0], 1.0, 1).len(), 1);
        assert_eq!(select_accepted(&[0.2, 0.9, 0.9], 0.95, 2), [1, 2]);
        assert_eq!(select_accepted(&[0.2], 0.95, 3), [0]);
    }

    #[test]
    fn argmax_confidence_is_softmax_probability() {
        let mut logits = vec![0.0; 260];
        logits[65] = 2.0;
        logits[MASK] = 50.0;
        let c = propose(&logits, 0, 0.0, &mut rng(0));
        assert_eq!(c.token, 65);
        let z = 2f64.exp() + 257.0;
        assert!((c.confidence - 2f64.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_is_empty() {
        let p = tiny();
        let out = generate(&p, &[65, 66], &DecodeConfig { max_new_tokens: 0, ..Default::default() }).unwrap();
        assert!(out.tokens.is_empty());
        assert_eq!(out.metrics.tpf, 0.0);
    }

    #[test]
    fn overflow_is_rejected_up_front() {
        let p = tiny();
        let cfg = DecodeConfig { max_new_tokens: 95, ..Default::default() };
        assert!(matches!(generate(&p, &[65, 66], &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn sequential_limit_and_accounting() {
        let p = tiny();
        let cfg = DecodeConfig {
            block_size: 4,
            threshold: 1.0,
            max_new_tokens: 10,
            ..Default::default()
        };
        let out = generate(&p, &[72, 105], &cfg).unwrap();
        assert!(out.metrics.accepted_history.iter().all(|&a| a == 1));
        assert_eq!(out.metrics.forward_passes, out.metrics.generated_tokens);
        assert_eq!(out.metrics.steps_per_block.len(), out.metrics.generated_tokens.div_ceil(4));
    }

    #[test]
    fn last_block_shrinks_to_budget() {
        let p = tiny();
        let cfg = DecodeConfig {
            block_size: 4,
            threshold: 0.5,
            max_new_tokens: 6,
            ..Default::default()
        };
        let mut st = DecodeState::new(&p, &[65], &cfg).unwrap();
        st.open_block(4).unwrap();
        while !st.unfilled().is_empty() {
            refine_step(&p, &mut st, &cfg).unwrap();
        }
        st.finalize_block().unwrap();
        assert_eq!(st.cache_len(), Some(1));
        st.open_block(2).unwrap();
        refine_step(&p, &mut st, &cfg).unwrap();
        assert_eq!(st.cache_len(), Some(5));
    }

    #[test]
    fn cache_on_off_agree() {
        let p = tiny();
        for temperature in [0.0, 0.8] {
            let cfg = DecodeConfig {
                block_size: 4,
                threshold: 0.3,
                max_new_tokens: 20,
                temperature,
                ..Default::default()
            };
            let r = decode_with_and_without_cache(&p, &[72, 105, 33], &cfg).unwrap();
            assert!(r.tokens_equal);
            assert_eq!(r.max_logit_divergence, 0.0);
            assert_eq!(r.forward_passes.0, r.forward_passes.1);
        }
    }

    #[test]
    fn block_one_threshold_one_is_greedy_sequential() {
        let p = tiny();
        let cfg = DecodeConfig {
            block_size: 1,
            threshold: 1.0,
            max_new_tokens: 8,
            ..Default::default()
        };
        let out = generate(&p, &[72, 105], &cfg).unwrap();
        // independent greedy loop: each new token reads all prior tokens
        let mut seq = vec![72, 105];
        let mut greedy = Vec::new();
        for _ in 0..8 {
            let mut toks = seq.clone();
            toks.push(MASK);
            let n = toks.len();
            let mask = crate::mask::AttentionMask::from_fn(n, crate::mask::MaskKind::Decode, |i, j| if i < 2 { j < 2 } else { j <= i });
            let row = forward_logits(&p, &toks, &mask, &[n - 1]).unwrap();
            let c = propose(&row, 0, 0.0, &mut rng(0));
            greedy.push(c.token);
            seq.push(c.token);
            if c.token == EOS {
                break;
            }
        }
        assert_eq!(out.tokens, truncate_after_eos(&greedy));
    }
}
