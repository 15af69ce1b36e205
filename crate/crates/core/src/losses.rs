//! Training objectives over denoiser logits.
//!
//! Every masked-token objective is `sum_masked weight(t_row) * CE / N` where
//! `N` counts the loss-eligible (non-PAD, non-prompt) tokens of the batch, so
//! the all-masked block-size-1 limit is exactly the mean next-token
//! cross-entropy. A batch with no masked position yields `Ok(None)`, which
//! callers treat as a skipped batch.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{bdlm_masks, forward_train, Bound, DenoiserParams, Logits, ModelConfig, StabilizerConfig};
use crate::noising::{NoiseSchedule, NoisedBatch};
use crate::packing::{conditional_piece_len, pack_pairs, PackedBatch};
use crate::real::Real;
use crate::rng::Rng;
use crate::vocab::Token;

/// Scalar summary of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Unweighted mean cross-entropy over masked positions.
    pub per_token_ce: f64,
    pub masked_count: usize,
    pub normalizer: usize,
    pub extras: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn extra(&self, name: &str) -> Option<f64> {
        self.extras.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

/// A differentiable loss node with its report.
#[derive(Debug, Clone)]
pub struct Loss {
    pub var: Var,
    pub report: LossReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapConfig {
    pub lambda: f64,
}

impl Default for CapConfig {
    fn default() -> Self {
        CapConfig { lambda: 0.5 }
    }
}

impl CapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda >= 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("cap lambda must be >= 0, got {}", self.lambda)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub mc_samples: usize,
    pub shared_noise: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            mc_samples: 1,
            shared_noise: true,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(alloc::format!("dpo beta must be > 0, got {}", self.beta)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("dpo mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

fn targets_and_weights<T: Real>(logits: &Logits, batch: &NoisedBatch, normalizer: usize) -> (Vec<Token>, Vec<T>) {
    let scale = 1.0 / normalizer as f64;
    logits
        .positions
        .iter()
        .map(|&(r, k)| (batch.clean[r][k], T::lit(batch.weight[r] * scale)))
        .unzip()
}

/// Mean unweighted cross-entropy of the given rows, read off the graph values.
fn mean_ce<T: Real>(g: &Graph<T>, logits: Var, targets: &[Token]) -> f64 {
    let vocab = g.shape(logits)[1];
    let vals = g.value(logits);
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = &vals[i * vocab..(i + 1) * vocab];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
            let lse = m + num_traits::Float::ln(row.iter().map(|&z| num_traits::Float::exp(z.as_f64() - m)).sum::<f64>());
            lse - row[t].as_f64()
        })
        .sum();
    total / targets.len() as f64
}

fn check_logits<T: Real>(g: &Graph<T>, logits: &Logits, batch: &NoisedBatch) -> Result<Option<Var>> {
    let Some(var) = logits.var else {
        return if logits.positions.is_empty() {
            Ok(None)
        } else {
            Err(contract("logits without a graph node but with positions"))
        };
    };
    if g.shape(var)[0] != logits.positions.len() {
        return Err(contract("logit rows and positions disagree"));
    }
    for &(r, k) in &logits.positions {
        if r >= batch.rows() || k >= batch.row_len() || !batch.is_masked[r][k] || !batch.loss_mask[r][k] {
            return Err(contract(alloc::format!(
                "logit position ({r}, {k}) is not a masked supervised token"
            )));
        }
    }
    if logits.positions.len() != batch.masked_count() {
        return Err(contract("logits must cover every masked position"));
    }
    Ok(Some(var))
}

/// Weighted masked cross-entropy shared by every diffusion objective.
pub fn bdlm_loss<T: Real>(g: &mut Graph<T>, logits: &Logits, batch: &NoisedBatch) -> Result<Option<Loss>> {
    let Some(var) = check_logits(g, logits, batch)? else {
        return Ok(None);
    };
    let normalizer = batch.supervised_tokens();
    let (targets, weights) = targets_and_weights::<T>(logits, batch, normalizer);
    let loss = g.cross_entropy(var, &targets, &weights)?;
    let report = LossReport {
        value: g.scalar_value(loss).as_f64(),
        per_token_ce: mean_ce(g, var, &targets),
        masked_count: targets.len(),
        normalizer,
        extras: Vec::new(),
    };
    Ok(Some(Loss { var: loss, report }))
}

/// The single-block objective; identical arithmetic to [`bdlm_loss`].
pub fn mdlm_loss<T: Real>(g: &mut Graph<T>, logits: &Logits, batch: &NoisedBatch) -> Result<Option<Loss>> {
    bdlm_loss(g, logits, batch)
}

/// Conditional objective over response tokens only.
pub fn sft_loss<T: Real>(g: &mut Graph<T>, logits: &Logits, batch: &NoisedBatch) -> Result<Option<Loss>> {
    for (r, layout) in batch.layouts.iter().enumerate() {
        for (&(s, e), &p) in layout.doc_spans().iter().zip(layout.prompt_lens()) {
            if p == 0 {
                continue;
            }
            if batch.loss_mask[r][s..s + p].iter().any(|&m| m) {
                return Err(contract(alloc::format!("row {r}: prompt tokens are marked for supervision")));
            }
            if !batch.loss_mask[r][s + p..e].iter().any(|&m| m) {
                return Err(contract(alloc::format!("row {r}: response lies entirely inside the prompt")));
            }
        }
    }
    bdlm_loss(g, logits, batch)
}

/// Rows of `logits` whose strict argmax equals the target. Ties count as incorrect.
pub fn correct_rows(values: &[f64], vocab: usize, targets: &[Token]) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = &values[i * vocab..(i + 1) * vocab];
            row.iter().enumerate().all(|(j, &z)| j == t || z < row[t])
        })
        .map(|(i, _)| i)
        .collect()
}

/// Mean entropy (nats) over masked positions predicted correctly; a zero
/// constant when none qualify. Returns the node and the qualifying count.
pub fn confidence_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[Token]) -> Result<(Var, usize)> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "confidence_loss",
            lhs: shape,
            rhs: alloc::vec![targets.len()],
        });
    }
    let vals: Vec<f64> = g.value(logits).iter().map(|x| x.as_f64()).collect();
    let rows = correct_rows(&vals, shape[1], targets);
    if rows.is_empty() {
        return Ok((g.scalar(T::zero()), 0));
    }
    let n = rows.len();
    Ok((g.entropy(logits, &rows, T::one() / T::from_usize(n))?, n))
}

/// `sft + lambda * conf`.
pub fn cap_loss<T: Real>(g: &mut Graph<T>, sft: Var, conf: Var, cfg: &CapConfig) -> Result<Var> {
    cfg.validate()?;
    let c = g.scale(conf, T::lit(cfg.lambda))?;
    g.add(sft, c)
}

/// Combined CAP objective over an SFT batch; `extras` carries the entropy
/// term and the masked-token accuracy.
pub fn cap_objective<T: Real>(g: &mut Graph<T>, logits: &Logits, batch: &NoisedBatch, cfg: &CapConfig) -> Result<Option<Loss>> {
    let Some(sft) = sft_loss(g, logits, batch)? else {
        return Ok(None);
    };
    let var = logits.var.expect("non-empty logits");
    let targets: Vec<Token> = logits.positions.iter().map(|&(r, k)| batch.clean[r][k]).collect();
    let (conf, correct) = confidence_loss(g, var, &targets)?;
    let total = cap_loss(g, sft.var, conf, cfg)?;
    let mut report = sft.report;
    report.value = g.scalar_value(total).as_f64();
    report.extras.push(("sft", g.scalar_value(sft.var).as_f64()));
    report.extras.push(("entropy", g.scalar_value(conf).as_f64()));
    report.extras.push(("accuracy", correct as f64 / targets.len() as f64));
    Ok(Some(Loss { var: total, report }))
}

/// One Monte Carlo corruption draw for ELBO estimation: a timestep and one
/// uniform per response position. A position is masked when its uniform is
/// below `t`. Reusing a draw across models and responses shares the noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: f64,
    pub u: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample(rng: &mut Rng, len: usize, schedule: &NoiseSchedule) -> Self {
        let (lo, hi) = schedule.t_range();
        NoiseDraw {
            t: rng.random_range(lo..=hi),
            u: (0..len).map(|_| rng.random::<f64>()).collect(),
        }
    }

    /// Corrupts a single-row conditional batch. At least one supervised
    /// position (the one with the smallest uniform) is always masked.
    pub fn apply(&self, batch: &PackedBatch) -> Result<NoisedBatch> {
        if batch.rows() != 1 {
            return Err(contract("noise draws apply to single-row batches"));
        }
        let lm = &batch.loss_mask[0];
        let eligible: Vec<usize> = (0..lm.len()).filter(|&k| lm[k]).collect();
        if eligible.is_empty() {
            return Err(Error::NothingMasked);
        }
        if eligible.len() > self.u.len() {
            return Err(contract("noise draw is shorter than the response"));
        }
        let mut mask = alloc::vec![false; lm.len()];
        for (j, &k) in eligible.iter().enumerate() {
            mask[k] = self.u[j] < self.t;
        }
        if !mask.iter().any(|&m| m) {
            let j = (0..eligible.len())
                .min_by(|&a, &b| self.u[a].total_cmp(&self.u[b]))
                .expect("non-empty");
            mask[eligible[j]] = true;
        }
        NoisedBatch::from_masks(batch, alloc::vec![mask], alloc::vec![self.t])
    }
}

/// Single-row batch holding `prompt` followed by `response`.
pub fn pair_batch(prompt: &[Token], response: &[Token], block_size: usize) -> Result<PackedBatch> {
    let len = conditional_piece_len(prompt.len(), response.len(), block_size)?;
    pack_pairs([(prompt, response)], len, block_size)
}

/// Monte Carlo ELBO estimate of `log p(response | prompt)`: the negated
/// weighted masked cross-entropy summed over the response, averaged over
/// `draws`. Equals `-sft_loss.value * normalizer` for a single draw.
pub fn bdlm_elbo<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    prompt: &[Token],
    response: &[Token],
    block_size: usize,
    draws: &[NoiseDraw],
) -> Result<Var> {
    if response.is_empty() || draws.is_empty() {
        return Err(contract("elbo needs a non-empty response and at least one draw"));
    }
    let batch = pair_batch(prompt, response, block_size)?;
    let mut terms = Vec::with_capacity(draws.len());
    for d in draws {
        let nb = d.apply(&batch)?;
        let logits = forward_train(g, bound, cfg, &nb, &bdlm_masks(&nb), &StabilizerConfig::off(), 0, 0)?;
        let var = logits.var.expect("a draw masks at least one token");
        let (targets, weights) = targets_and_weights::<T>(&logits, &nb, 1);
        terms.push(g.cross_entropy(var, &targets, &weights)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, -T::one() / T::from_usize(draws.len()))
}

/// Reference-model ELBO values (no gradients) for `chosen` and `rejected`.
pub fn reference_elbos<T: Real>(
    reference: &DenoiserParams<T>,
    prompt: &[Token],
    chosen: &[Token],
    rejected: &[Token],
    block_size: usize,
    draws: (&[NoiseDraw], &[NoiseDraw]),
) -> Result<(T, T)> {
    let mut g = Graph::new();
    let bound = reference.bind(&mut g, false);
    let cfg = reference.config();
    let w = bdlm_elbo(&mut g, &bound, cfg, prompt, chosen, block_size, draws.0)?;
    let l = bdlm_elbo(&mut g, &bound, cfg, prompt, rejected, block_size, draws.1)?;
    Ok((g.scalar_value(w), g.scalar_value(l)))
}

/// Draws for the chosen and rejected evaluations. Under shared noise both
/// use the same draws.
pub fn dpo_draws(
    rng: &mut Rng,
    chosen_len: usize,
    rejected_len: usize,
    schedule: &NoiseSchedule,
    cfg: &DpoConfig,
) -> (Vec<NoiseDraw>, Vec<NoiseDraw>) {
    let n = chosen_len.max(rejected_len);
    let w: Vec<NoiseDraw> = (0..cfg.mc_samples).map(|_| NoiseDraw::sample(rng, n, schedule)).collect();
    let l = if cfg.shared_noise {
        w.clone()
    } else {
        (0..cfg.mc_samples).map(|_| NoiseDraw::sample(rng, n, schedule)).collect()
    };
    (w, l)
}

/// `-log sigmoid(beta * [(B_w - B_w_ref) - (B_l - B_l_ref)])` with the policy
/// ELBOs differentiable and the reference values held fixed.
pub fn dpo_loss<T: Real>(
    g: &mut Graph<T>,
    policy_chosen: Var,
    policy_rejected: Var,
    reference: (T, T),
    cfg: &DpoConfig,
) -> Result<Var> {
    cfg.validate()?;
    let rw = g.constant(&[1], alloc::vec![reference.0])?;
    let rl = g.constant(&[1], alloc::vec![reference.1])?;
    let dw = g.sub(policy_chosen, rw)?;
    let dl = g.sub(policy_rejected, rl)?;
    let margin = g.sub(dw, dl)?;
    let z = g.scale(margin, T::lit(cfg.beta))?;
    let ls = g.log_sigmoid(z)?;
    g.scale(ls, -T::one())
}

/// Full DPO objective for one preference pair.
#[allow(clippy::too_many_arguments)]
pub fn dpo_objective<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    policy: &DenoiserParams<T>,
    reference: &DenoiserParams<T>,
    prompt: &[Token],
    chosen: &[Token],
    rejected: &[Token],
    block_size: usize,
    draws: (&[NoiseDraw], &[NoiseDraw]),
    cfg: &DpoConfig,
) -> Result<Loss> {
    let refs = reference_elbos(reference, prompt, chosen, rejected, block_size, draws)?;
    let cfgm = policy.config();
    let w = bdlm_elbo(g, bound, cfgm, prompt, chosen, block_size, draws.0)?;
    let l = bdlm_elbo(g, bound, cfgm, prompt, rejected, block_size, draws.1)?;
    let var = dpo_loss(g, w, l, refs, cfg)?;
    let margin = (g.scalar_value(w) - refs.0) - (g.scalar_value(l) - refs.1);
    let report = LossReport {
        value: g.scalar_value(var).as_f64(),
        per_token_ce: f64::NAN,
        masked_count: 0,
        normalizer: 1,
        extras: alloc::vec![("margin", margin.as_f64())],
    };
    Ok(Loss { var, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_mdlm, mdlm_masks};
    use crate::noising::sample_noised_at;
    use crate::packing::pack_documents;
    use crate::rng::rng;
    use crate::vocab::{EOS, VOCAB_SIZE};
    use alloc::vec;

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

    fn logits_for(g: &mut Graph<f64>, nb: &NoisedBatch, rows: Vec<f64>, vocab: usize) -> Logits {
        let positions = nb.masked_positions();
        let var = g.constant(&[positions.len(), vocab], rows).unwrap();
        Logits { var: Some(var), positions }
    }

    fn small_vocab_batch(t: f64) -> NoisedBatch {
        let b = pack_documents(&[vec![0, 1, 2, 3, 0, 1, 2, 3]], 8, 4).unwrap();
        sample_noised_at(&b, &[t; 1], 3).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let nb = small_vocab_batch(1.0);
        let mut g = Graph::new();
        let lg = logits_for(&mut g, &nb, alloc::vec![0.0; 8 * 4], 4);
        let loss = bdlm_loss(&mut g, &lg, &nb).unwrap().unwrap();
        assert!((loss.report.value - 4f64.ln()).abs() < 1e-12);
        assert_eq!(loss.report.masked_count, 8);
    }

    #[test]
    fn perfect_logits_give_zero() {
        let nb = small_vocab_batch(1.0);
        let mut g = Graph::new();
        let mut rows = alloc::vec![0.0; 8 * 4];
        for (i, &(r, k)) in nb.masked_positions().iter().enumerate() {
            rows[i * 4 + nb.clean[r][k]] = 30.0;
        }
        let lg = logits_for(&mut g, &nb, rows, 4);
        assert!(bdlm_loss(&mut g, &lg, &nb).unwrap().unwrap().report.value <= 1e-6);
    }

    #[test]
    fn halving_t_doubles_value() {
        let nb = small_vocab_batch(0.6);
        let mut half = nb.clone();
        half.t = alloc::vec![0.3];
        half.weight = alloc::vec![NoiseSchedule::weight(0.3)];
        let rows: Vec<f64> = (0..nb.masked_count() * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let a = logits_for(&mut g, &nb, rows.clone(), 4);
        let b = logits_for(&mut g, &half, rows, 4);
        let va = bdlm_loss(&mut g, &a, &nb).unwrap().unwrap().report.value;
        let vb = mdlm_loss(&mut g, &b, &half).unwrap().unwrap().report.value;
        assert!((vb - 2.0 * va).abs() < 1e-12);
    }

    #[test]
    fn nothing_masked_is_skip() {
        let b = pack_documents(&[vec![1; 8]], 8, 4).unwrap();
        let nb = NoisedBatch::from_masks(&b, alloc::vec![alloc::vec![false; 8]], alloc::vec![0.5]).unwrap();
        let mut g = Graph::<f64>::new();
        let lg = Logits { var: None, positions: Vec::new() };
        assert!(bdlm_loss(&mut g, &lg, &nb).unwrap().is_none());
    }

    #[test]
    fn confidence_examples() {
        let mut g = Graph::<f64>::new();
        let p = [0.7f64, 0.1, 0.1, 0.1];
        let row: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        let v = g.constant(&[1, 4], row.clone()).unwrap();
        let (c, n) = confidence_loss(&mut g, v, &[0]).unwrap();
        let oracle = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        assert_eq!(n, 1);
        assert!((g.scalar_value(c) - oracle).abs() < 1e-12);
        assert!((oracle - 0.9404).abs() < 1e-4);

        let (wrong, n) = confidence_loss(&mut g, v, &[2]).unwrap();
        assert_eq!((g.scalar_value(wrong), n), (0.0, 0));

        let tie = g.constant(&[1, 3], alloc::vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(confidence_loss(&mut g, tie, &[0]).unwrap().1, 0);

        let onehot = g.constant(&[1, 3], alloc::vec![0.0, 800.0, 0.0]).unwrap();
        let (h, _) = confidence_loss(&mut g, onehot, &[1]).unwrap();
        assert_eq!(g.scalar_value(h), 0.0);
    }

    #[test]
    fn cap_arithmetic() {
        let mut g = Graph::<f64>::new();
        let s = g.scalar(1.0);
        let c = g.scalar(0.5);
        let one = cap_loss(&mut g, s, c, &CapConfig { lambda: 1.0 }).unwrap();
        assert_eq!(g.scalar_value(one), 1.5);
        let zero = cap_loss(&mut g, s, c, &CapConfig { lambda: 0.0 }).unwrap();
        assert_eq!(g.scalar_value(zero), 1.0);
        assert!(CapConfig { lambda: -1.0 }.validate().is_err());
    }

    #[test]
    fn sft_rejects_supervised_prompt() {
        let mut b = pair_batch(&[65, 66], &[67, EOS], 2).unwrap();
        b.loss_mask[0][0] = true;
        let nb = NoisedBatch::from_masks(&b, alloc::vec![alloc::vec![true, false, true, false]], alloc::vec![0.5]).unwrap();
        let mut g = Graph::<f64>::new();
        let lg = logits_for(&mut g, &nb, alloc::vec![0.0; 2 * VOCAB_SIZE], VOCAB_SIZE);
        assert!(sft_loss(&mut g, &lg, &nb).is_err());
    }

    #[test]
    fn sft_ignores_prompt_logits_and_matches_bdlm_without_prompt() {
        let p = DenoiserParams::<f64>::init(tiny(), 5).unwrap();
        let b = pair_batch(&[65, 66, 67], &[68, 69, 70, EOS], 2).unwrap();
        let nb = sample_noised_at(&b, &[0.7], 11).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let lg = forward_train(&mut g, &bound, p.config(), &nb, &bdlm_masks(&nb), &StabilizerConfig::off(), 0, 0).unwrap();
        let s = sft_loss(&mut g, &lg, &nb).unwrap().unwrap();
        let d = bdlm_loss(&mut g, &lg, &nb).unwrap().unwrap();
        assert_eq!(s.report.value, d.report.value);
        assert_eq!(s.report.normalizer, 4);
    }

    #[test]
    fn elbo_is_negated_unnormalized_sft() {
        let p = DenoiserParams::<f64>::init(tiny(), 6).unwrap();
        let (prompt, resp) = ([65usize, 66], [67usize, 68, 69, EOS]);
        let mut r = rng(1);
        let draw = NoiseDraw::sample(&mut r, resp.len(), &NoiseSchedule::default());
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let e = bdlm_elbo(&mut g, &bound, p.config(), &prompt, &resp, 2, core::slice::from_ref(&draw)).unwrap();
        let nb = draw.apply(&pair_batch(&prompt, &resp, 2).unwrap()).unwrap();
        let lg = forward_train(&mut g, &bound, p.config(), &nb, &bdlm_masks(&nb), &StabilizerConfig::off(), 0, 0).unwrap();
        let s = sft_loss(&mut g, &lg, &nb).unwrap().unwrap();
        let lhs = g.scalar_value(e);
        let rhs = -s.report.value * s.report.normalizer as f64;
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn dpo_self_reference_is_ln2() {
        let p = DenoiserParams::<f64>::init(tiny(), 7).unwrap();
        let prompt = [65usize, 66];
        let (w, l) = ([67usize, 68, EOS], [69usize, EOS]);
        let cfg = DpoConfig::default();
        let mut r = rng(2);
        let (dw, dl) = dpo_draws(&mut r, w.len(), l.len(), &NoiseSchedule::default(), &cfg);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let loss = dpo_objective(&mut g, &bound, &p, &p, &prompt, &w, &l, 2, (&dw, &dl), &cfg).unwrap();
        assert_eq!(loss.report.value, core::f64::consts::LN_2);
    }

    #[test]
    fn dpo_is_monotone_in_margin() {
        let mut g = Graph::<f64>::new();
        let cfg = DpoConfig::default();
        let mut last = f64::INFINITY;
        for m in [-500.0, -10.0, 0.0, 10.0, 500.0] {
            let w = g.scalar(m);
            let l = g.scalar(0.0);
            let d = dpo_loss(&mut g, w, l, (0.0, 0.0), &cfg).unwrap();
            let v = g.scalar_value(d);
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn mdlm_and_bdlm_agree_at_one_block() {
        let p = DenoiserParams::<f64>::init(tiny(), 8).unwrap();
        let b = pack_documents(&[vec![70, 71, 72, 73, 74, 75, 76, 77]], 8, 8).unwrap();
        let nb = sample_noised_at(&b, &[0.5], 4).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let a = forward_train(&mut g, &bound, p.config(), &nb, &bdlm_masks(&nb), &StabilizerConfig::off(), 0, 0).unwrap();
        let m = forward_mdlm(&mut g, &bound, p.config(), &nb, &mdlm_masks(&nb)).unwrap();
        let la = bdlm_loss(&mut g, &a, &nb).unwrap().unwrap();
        let lm = mdlm_loss(&mut g, &m, &nb).unwrap().unwrap();
        assert_eq!(la.report.value, lm.report.value);
    }
}
