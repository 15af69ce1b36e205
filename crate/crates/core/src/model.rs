//! Pre-norm transformer denoiser with tied input/output embeddings.
//!
//! One network serves every regime; only the attention mask and the token
//! layout change. Block-diffusion training runs over the concatenated
//! `[x_t; x_0]` row, masked-diffusion training over `x_t` alone, and decoding
//! over a prompt, the finalized blocks and the active block, with keys and
//! values of finalized content optionally served from a [`KvCache`].

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::graph::{AttnSegment, Graph, Var};
use crate::mask::{build_bdlm_mask, build_mdlm_mask, AttentionMask, MaskKind};
use crate::noising::NoisedBatch;
use crate::real::Real;
use crate::rng::rng;
use crate::tensor::Tensor;
use crate::vocab::{Token, MASK, VOCAB_SIZE};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_len: 512,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config("rotary encoding needs an even head dimension".into()));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 || self.vocab <= MASK {
            return Err(Error::Config("model dimensions must be positive and cover the vocabulary".into()));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Expected `(name, shape)` of every parameter tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![(String::from("tok_emb"), vec![self.vocab, d])];
        for l in 0..self.n_layers {
            for (n, s) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ffn_norm", vec![d]),
                ("w1", vec![d, f]),
                ("w2", vec![f, d]),
            ] {
                out.push((format!("layers.{l}.{n}"), s));
            }
        }
        out.push((String::from("final_norm"), vec![d]));
        out
    }
}

/// Gaussian noise added to MASK-token embeddings during early conversion steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilizerConfig {
    pub sigma: f64,
    pub active_steps: usize,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        StabilizerConfig {
            sigma: 0.02,
            active_steps: 200,
        }
    }
}

impl StabilizerConfig {
    pub fn off() -> Self {
        StabilizerConfig {
            sigma: 0.0,
            active_steps: 0,
        }
    }

    pub fn active_at(&self, step: usize) -> bool {
        self.sigma > 0.0 && step < self.active_steps
    }
}

/// Named parameter tensors of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T: Real> {
    config: ModelConfig,
    tensors: Vec<(String, Tensor<T>)>,
}

const PER_LAYER: usize = 8;

/// Graph handles of a bound parameter set, in storage order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    fn layer(&self, l: usize, slot: usize) -> Var {
        self.vars[1 + l * PER_LAYER + slot]
    }

    fn final_norm(&self) -> Var {
        *self.vars.last().expect("non-empty")
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> DenoiserParams<T> {
    /// Random initialization: N(0, 0.02) weights, residual projections scaled
    /// by `1/sqrt(2 n_layers)`, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let base = Normal::new(0.0f64, 0.02).expect("valid std");
        let resid_scale = 1.0 / num_traits::Float::sqrt(2.0 * config.n_layers as f64);
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with("norm") {
                    vec![T::one(); n]
                } else {
                    let s = if name.ends_with(".wo") || name.ends_with(".w2") { resid_scale } else { 1.0 };
                    (0..n).map(|_| T::lit(base.sample(&mut r) * s)).collect()
                };
                let t = Tensor::new(&shape, data).expect("spec shape").with_grad();
                (name, t)
            })
            .collect();
        Ok(DenoiserParams { config, tensors })
    }

    /// Assembles parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(contract(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut out = Vec::with_capacity(tensors.len());
        for ((name, shape), (tname, mut t)) in specs.into_iter().zip(tensors) {
            if name != tname {
                return Err(contract(format!("expected tensor `{name}`, found `{tname}`")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "params",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            t.set_requires_grad(true);
            out.push((name, t));
        }
        Ok(DenoiserParams { config, tensors: out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor<T>)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    pub fn zero_grads(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config,
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Registers the parameters as graph leaves. Frozen bindings never receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t)
                } else {
                    g.constant(t.shape(), t.data().to_vec()).expect("tensor invariant")
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the graph's leaf gradients into each tensor's accumulator.
    pub fn absorb_grads(&mut self, g: &Graph<T>, bound: &Bound) -> Result<()> {
        for ((_, t), &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(gr) = g.grad(v) {
                t.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }
}

/// Logit rows for a set of `(row, position)` targets. `var` is `None` when
/// there are no positions.
#[derive(Debug, Clone)]
pub struct Logits {
    pub var: Option<Var>,
    pub positions: Vec<(usize, usize)>,
}

struct Stack<'a> {
    tokens: &'a [Token],
    positions: &'a [usize],
    segs: Vec<AttnSegment>,
    noise: Option<Vec<f64>>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[Token], positions: &[usize]) -> Result<()> {
    if let Some(&p) = positions.iter().max() {
        if p >= cfg.max_len {
            return Err(contract(format!("position {p} exceeds max_len {}", cfg.max_len)));
        }
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(contract(format!("token {t} outside vocabulary")));
    }
    Ok(())
}

/// Runs the transformer body and returns final-normalized hidden states.
fn body<T: Real>(g: &mut Graph<T>, bound: &Bound, cfg: &ModelConfig, s: Stack<'_>) -> Result<Var> {
    check_tokens(cfg, s.tokens, s.positions)?;
    let eps = T::lit(NORM_EPS);
    let mut x = g.embedding(bound.tok_emb(), s.tokens)?;
    if let Some(noise) = s.noise {
        let c = g.constant(&[s.tokens.len(), cfg.d_model], noise.into_iter().map(T::lit).collect())?;
        x = g.add(x, c)?;
    }
    for l in 0..cfg.n_layers {
        let h = g.rms_norm(x, bound.layer(l, 0), eps)?;
        let q = g.matmul(h, bound.layer(l, 1))?;
        let k = g.matmul(h, bound.layer(l, 2))?;
        let v = g.matmul(h, bound.layer(l, 3))?;
        let q = g.rope(q, s.positions, cfg.n_heads, cfg.rope_base)?;
        let k = g.rope(k, s.positions, cfg.n_heads, cfg.rope_base)?;
        let a = g.attention(q, k, v, s.segs.clone(), cfg.n_heads)?;
        let o = g.matmul(a, bound.layer(l, 4))?;
        x = g.add(x, o)?;
        let h = g.rms_norm(x, bound.layer(l, 5), eps)?;
        let f = g.matmul(h, bound.layer(l, 6))?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, bound.layer(l, 7))?;
        x = g.add(x, f)?;
    }
    g.rms_norm(x, bound.final_norm(), eps)
}

fn head<T: Real>(g: &mut Graph<T>, bound: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
    let picked = g.gather_rows(hidden, rows)?;
    g.matmul_nt(picked, bound.tok_emb())
}

/// Block-diffusion training masks for every row of `batch`.
pub fn bdlm_masks(batch: &NoisedBatch) -> Vec<Arc<AttentionMask>> {
    batch.layouts.iter().map(|l| Arc::new(build_bdlm_mask(l))).collect()
}

/// Masked-diffusion document masks for every row of `batch`.
pub fn mdlm_masks(batch: &NoisedBatch) -> Vec<Arc<AttentionMask>> {
    batch.layouts.iter().map(|l| Arc::new(build_mdlm_mask(l))).collect()
}

fn check_masks(batch: &NoisedBatch, masks: &[Arc<AttentionMask>], kind: MaskKind, factor: usize) -> Result<()> {
    if masks.len() != batch.rows() {
        return Err(contract(format!("{} masks for {} rows", masks.len(), batch.rows())));
    }
    for (r, m) in masks.iter().enumerate() {
        if m.kind() != kind {
            return Err(contract(format!("row {r}: expected a {kind:?} mask, got {:?}", m.kind())));
        }
        if m.dim() != factor * batch.layouts[r].total_length() || batch.clean[r].len() != batch.layouts[r].total_length() {
            return Err(contract(format!("row {r}: mask and batch layouts disagree")));
        }
    }
    Ok(())
}

fn stabilizer_noise(tokens: &[Token], d: usize, stab: &StabilizerConfig, step: usize, seed: u64) -> Option<Vec<f64>> {
    if !stab.active_at(step) || !tokens.contains(&MASK) {
        return None;
    }
    let mut r = rng(seed);
    let dist = Normal::new(0.0, stab.sigma).expect("sigma checked positive");
    let mut out = vec![0.0; tokens.len() * d];
    for (i, &t) in tokens.iter().enumerate() {
        if t == MASK {
            out[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = dist.sample(&mut r));
        }
    }
    Some(out)
}

/// Forward over the concatenated `[x_t; x_0]` rows; logits at every masked
/// position of `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn forward_train<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &NoisedBatch,
    masks: &[Arc<AttentionMask>],
    stabilizer: &StabilizerConfig,
    step: usize,
    noise_seed: u64,
) -> Result<Logits> {
    check_masks(batch, masks, MaskKind::BdlmTrain, 2)?;
    let positions_out = batch.masked_positions();
    if positions_out.is_empty() {
        return Ok(Logits {
            var: None,
            positions: positions_out,
        });
    }
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segs = Vec::new();
    for (r, m) in masks.iter().enumerate() {
        let start = tokens.len();
        tokens.extend_from_slice(&batch.noisy[r]);
        tokens.extend_from_slice(&batch.clean[r]);
        let l = batch.clean[r].len();
        positions.extend(0..l);
        positions.extend(0..l);
        segs.push(AttnSegment::square(start, m.clone()));
    }
    let row_len = 2 * batch.row_len();
    let rows: Vec<usize> = positions_out.iter().map(|&(r, k)| r * row_len + k).collect();
    let noise = stabilizer_noise(&tokens, cfg.d_model, stabilizer, step, noise_seed);
    let hidden = body(
        g,
        bound,
        cfg,
        Stack {
            tokens: &tokens,
            positions: &positions,
            segs,
            noise,
        },
    )?;
    let var = head(g, bound, hidden, &rows)?;
    Ok(Logits {
        var: Some(var),
        positions: positions_out,
    })
}

/// Forward over `x_t` alone under document masks; logits at masked positions.
pub fn forward_mdlm<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &NoisedBatch,
    masks: &[Arc<AttentionMask>],
) -> Result<Logits> {
    forward_mdlm_stabilized(g, bound, cfg, batch, masks, &StabilizerConfig::off(), 0, 0)
}

#[allow(clippy::too_many_arguments)]
pub fn forward_mdlm_stabilized<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &NoisedBatch,
    masks: &[Arc<AttentionMask>],
    stabilizer: &StabilizerConfig,
    step: usize,
    noise_seed: u64,
) -> Result<Logits> {
    check_masks(batch, masks, MaskKind::MdlmTrain, 1)?;
    let positions_out = batch.masked_positions();
    if positions_out.is_empty() {
        return Ok(Logits {
            var: None,
            positions: positions_out,
        });
    }
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segs = Vec::new();
    for (r, m) in masks.iter().enumerate() {
        segs.push(AttnSegment::square(tokens.len(), m.clone()));
        tokens.extend_from_slice(&batch.noisy[r]);
        positions.extend(0..batch.noisy[r].len());
    }
    let row_len = batch.row_len();
    let rows: Vec<usize> = positions_out.iter().map(|&(r, k)| r * row_len + k).collect();
    let noise = stabilizer_noise(&tokens, cfg.d_model, stabilizer, step, noise_seed);
    let hidden = body(
        g,
        bound,
        cfg,
        Stack {
            tokens: &tokens,
            positions: &positions,
            segs,
            noise,
        },
    )?;
    let var = head(g, bound, hidden, &rows)?;
    Ok(Logits {
        var: Some(var),
        positions: positions_out,
    })
}

/// Single-sequence forward under an arbitrary square mask; returns logits
/// (`rows.len() x V`, row-major) for the requested rows.
pub fn forward_logits<T: Real>(
    params: &DenoiserParams<T>,
    tokens: &[Token],
    mask: &AttentionMask,
    rows: &[usize],
) -> Result<Vec<T>> {
    if mask.dim() != tokens.len() {
        return Err(contract("mask dimension must equal the number of tokens"));
    }
    let cfg = params.config();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let hidden = body(
        &mut g,
        &bound,
        cfg,
        Stack {
            tokens,
            positions: &positions,
            segs: vec![AttnSegment::square(0, Arc::new(mask.clone()))],
            noise: None,
        },
    )?;
    let out = head(&mut g, &bound, hidden, rows)?;
    Ok(g.value(out).to_vec())
}

/// Per-layer rotated keys and values of committed (prompt and finalized) positions.
#[derive(Debug, Clone)]
pub struct KvCache<T: Real> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    d_model: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
            d_model: cfg.d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// One cached decode pass over `pending ++ active` at positions
/// `cache.len()..`. `pending` holds content that just became final (the
/// prompt, or the last finalized block): its rows attend to the cache and to
/// `pending` only, and its keys and values are appended to the cache. The
/// `active` rows attend to everything. Returns logits for the `active` rows.
pub fn forward_chunk<T: Real>(
    params: &DenoiserParams<T>,
    cache: &mut KvCache<T>,
    pending: &[Token],
    active: &[Token],
) -> Result<Vec<T>> {
    let cfg = params.config();
    if active.is_empty() {
        return Err(contract("empty active block"));
    }
    if cache.keys.len() != cfg.n_layers || cache.d_model != cfg.d_model {
        return Err(contract("kv cache was built for a different model"));
    }
    let c = cache.len;
    let np = pending.len();
    let chunk: Vec<Token> = pending.iter().chain(active).copied().collect();
    let n = chunk.len();
    let positions: Vec<usize> = (c..c + n).collect();
    check_tokens(cfg, &chunk, &positions)?;
    let d = cfg.d_model;
    let committed = c + np;
    let mask = Arc::new(AttentionMask::from_fn(c + n, MaskKind::Decode, |i, j| {
        i >= committed || j < committed
    }));
    let seg = AttnSegment {
        q_start: 0,
        q_len: n,
        k_start: 0,
        k_len: c + n,
        mask,
        mask_row_offset: c,
    };
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let eps = T::lit(NORM_EPS);
    let mut x = g.embedding(bound.tok_emb(), &chunk)?;
    let mut new_kv = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let h = g.rms_norm(x, bound.layer(l, 0), eps)?;
        let q = g.matmul(h, bound.layer(l, 1))?;
        let k = g.matmul(h, bound.layer(l, 2))?;
        let v = g.matmul(h, bound.layer(l, 3))?;
        let q = g.rope(q, &positions, cfg.n_heads, cfg.rope_base)?;
        let k = g.rope(k, &positions, cfg.n_heads, cfg.rope_base)?;
        let (kf, vf) = if c > 0 {
            let ck = g.constant(&[c, d], cache.keys[l].clone())?;
            let cv = g.constant(&[c, d], cache.values[l].clone())?;
            (g.concat_rows(ck, k)?, g.concat_rows(cv, v)?)
        } else {
            (k, v)
        };
        new_kv.push((k, v));
        let a = g.attention(q, kf, vf, vec![seg.clone()], cfg.n_heads)?;
        let o = g.matmul(a, bound.layer(l, 4))?;
        x = g.add(x, o)?;
        let h = g.rms_norm(x, bound.layer(l, 5), eps)?;
        let f = g.matmul(h, bound.layer(l, 6))?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, bound.layer(l, 7))?;
        x = g.add(x, f)?;
    }
    let hidden = g.rms_norm(x, bound.final_norm(), eps)?;
    let rows: Vec<usize> = (np..n).collect();
    let logits = head(&mut g, &bound, hidden, &rows)?;
    for (l, (k, v)) in new_kv.into_iter().enumerate() {
        cache.keys[l].extend_from_slice(&g.value(k)[..np * d]);
        cache.values[l].extend_from_slice(&g.value(v)[..np * d]);
    }
    cache.len += np;
    Ok(g.value(logits).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::decode_mask;
    use crate::noising::{sample_noised_at, NoisedBatch};
    use crate::packing::pack_documents;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
            ..ModelConfig::default()
        }
    }

    fn batch(block: usize, t: f64) -> NoisedBatch {
        let b = pack_documents(&[vec![65, 66, 67, 68, 69, 70, 71, 72], vec![80, 81, 82]], 12, block).unwrap();
        sample_noised_at(&b, &vec![t; b.rows()], 7).unwrap()
    }

    #[test]
    fn param_specs_are_unique() {
        let specs = tiny().param_specs();
        for (i, (a, _)) in specs.iter().enumerate() {
            assert!(specs[i + 1..].iter().all(|(b, _)| a != b));
        }
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
    }

    #[test]
    fn train_logits_shape() {
        let p = DenoiserParams::<f64>::init(tiny(), 1).unwrap();
        let nb = batch(4, 0.6);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let lg = forward_train(&mut g, &bound, p.config(), &nb, &bdlm_masks(&nb), &StabilizerConfig::off(), 0, 0).unwrap();
        assert_eq!(g.shape(lg.var.unwrap()), &[nb.masked_count(), VOCAB_SIZE]);
    }

    #[test]
    fn zero_weights_give_constant_rows() {
        let mut p = DenoiserParams::<f64>::init(tiny(), 1).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let nb = batch(4, 0.6);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let lg = forward_train(&mut g, &bound, p.config(), &nb, &bdlm_masks(&nb), &StabilizerConfig::off(), 0, 0).unwrap();
        for row in g.value(lg.var.unwrap()).chunks(VOCAB_SIZE) {
            assert!(row.iter().all(|&x| x == row[0]));
        }
    }

    #[test]
    fn zero_sigma_is_bitwise_noise_free() {
        let p = DenoiserParams::<f32>::init(tiny(), 2).unwrap();
        let nb = batch(4, 0.7);
        let masks = bdlm_masks(&nb);
        let run = |stab: StabilizerConfig| {
            let mut g = Graph::new();
            let bound = p.bind(&mut g, false);
            let lg = forward_train(&mut g, &bound, p.config(), &nb, &masks, &stab, 0, 99).unwrap();
            g.value(lg.var.unwrap()).to_vec()
        };
        let off = run(StabilizerConfig::off());
        let zero = run(StabilizerConfig {
            sigma: 0.0,
            active_steps: 1000,
        });
        assert_eq!(off, zero);
        let on = run(StabilizerConfig {
            sigma: 0.5,
            active_steps: 1000,
        });
        assert_ne!(off, on);
        // outside the active window the stabilizer is inert
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let late = forward_train(&mut g, &bound, p.config(), &nb, &masks, &StabilizerConfig { sigma: 0.5, active_steps: 10 }, 10, 99).unwrap();
        assert_eq!(g.value(late.var.unwrap()), off.as_slice());
    }

    #[test]
    fn empty_mask_gives_empty_logits() {
        let p = DenoiserParams::<f64>::init(tiny(), 1).unwrap();
        let b = pack_documents(&[vec![65; 8]], 8, 4).unwrap();
        let nb = NoisedBatch::from_masks(&b, vec![vec![false; 8]], vec![0.5]).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let lg = forward_mdlm(&mut g, &bound, p.config(), &nb, &mdlm_masks(&nb)).unwrap();
        assert!(lg.var.is_none());
        assert!(lg.positions.is_empty());
    }

    #[test]
    fn wrong_mask_kind_is_rejected() {
        let p = DenoiserParams::<f64>::init(tiny(), 1).unwrap();
        let nb = batch(4, 0.5);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        assert!(forward_train(&mut g, &bound, p.config(), &nb, &mdlm_masks(&nb), &StabilizerConfig::off(), 0, 0).is_err());
    }

    #[test]
    fn chunked_cache_matches_full_forward() {
        let p = DenoiserParams::<f64>::init(tiny(), 3).unwrap();
        let prompt = [72usize, 105, 33];
        let block1 = [97usize, 98];
        let active = [MASK, 99];
        let mut cache = KvCache::new(p.config());
        forward_chunk(&p, &mut cache, &prompt, &[MASK, MASK]).unwrap();
        assert_eq!(cache.len(), 3);
        let cached = forward_chunk(&p, &mut cache, &block1, &active).unwrap();
        assert_eq!(cache.len(), 5);
        let again = forward_chunk(&p, &mut cache, &[], &active).unwrap();
        assert_eq!(cache.len(), 5);
        assert_eq!(cached, again);

        let mut all = prompt.to_vec();
        all.extend_from_slice(&block1);
        all.extend_from_slice(&active);
        let mask = decode_mask(3, 2, 2, 2);
        let full = forward_logits(&p, &all, &mask, &[5, 6]).unwrap();
        assert_eq!(cached, full);
    }
}
