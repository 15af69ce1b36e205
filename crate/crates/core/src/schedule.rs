//! Warmup-stable-decay block-size schedule, top-k checkpoint selection and
//! arithmetic parameter merging.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::model::DenoiserParams;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Warmup,
    Stable,
    Decay,
}

impl PhaseKind {
    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Warmup => "warmup",
            PhaseKind::Stable => "stable",
            PhaseKind::Decay => "decay",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub block_size: usize,
    /// Supervised-token budget of this phase.
    pub token_budget: usize,
}

impl Phase {
    /// `warmup_0`, `stable`, `decay_1`, ...
    pub fn label(&self, index_in_kind: usize) -> String {
        match self.kind {
            PhaseKind::Stable => String::from("stable"),
            k => format!("{}_{index_in_kind}", k.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSchedule {
    pub seq_len: usize,
    pub phases: Vec<Phase>,
    pub final_block_size: usize,
}

const WARMUP_SHARE: [f64; 5] = [0.05, 0.05, 0.05, 0.05, 0.10];
const STABLE_SHARE: f64 = 0.5;
const DECAY_SHARE: f64 = 0.2;

impl BlockSchedule {
    /// Desk-scale ladder: warmup `1 -> 4 -> min(32, L/16) -> 64 -> L`
    /// keeping only rungs that divide `L` and do not exceed `L/4`; one stable
    /// phase at `L`; decay `L/4 -> final` (the `L/4` rung only when it lies
    /// strictly above `final`). Budgets are fractions of `total_tokens`.
    pub fn default_wsd(seq_len: usize, final_block_size: usize, total_tokens: usize) -> Result<Self> {
        if seq_len == 0 || final_block_size == 0 || seq_len % final_block_size != 0 {
            return Err(Error::Config(format!(
                "final block size {final_block_size} must divide sequence length {seq_len}"
            )));
        }
        let mut warm = vec![1usize];
        let mut rungs = vec![4, 32.min(seq_len / 16), 64];
        rungs.sort_unstable();
        for r in rungs {
            if r > 1 && 4 * r <= seq_len && seq_len % r == 0 && r > *warm.last().expect("non-empty") {
                warm.push(r);
            }
        }
        if *warm.last().expect("non-empty") != seq_len {
            warm.push(seq_len);
        }
        let mut decay = Vec::new();
        let quarter = seq_len / 4;
        if quarter > final_block_size && seq_len % 4 == 0 && quarter % final_block_size == 0 {
            decay.push(quarter);
        }
        decay.push(final_block_size);

        let warm_shares: Vec<f64> = if warm.len() == WARMUP_SHARE.len() {
            WARMUP_SHARE.to_vec()
        } else {
            vec![0.3 / warm.len() as f64; warm.len()]
        };
        let budget = |share: f64| num_traits::Float::round(share * total_tokens as f64) as usize;
        let mut phases: Vec<Phase> = warm
            .iter()
            .zip(warm_shares)
            .map(|(&b, s)| Phase {
                kind: PhaseKind::Warmup,
                block_size: b,
                token_budget: budget(s),
            })
            .collect();
        phases.push(Phase {
            kind: PhaseKind::Stable,
            block_size: seq_len,
            token_budget: budget(STABLE_SHARE),
        });
        let d = decay.len() as f64;
        phases.extend(decay.iter().map(|&b| Phase {
            kind: PhaseKind::Decay,
            block_size: b,
            token_budget: budget(DECAY_SHARE / d),
        }));
        let s = BlockSchedule {
            seq_len,
            phases,
            final_block_size,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn sizes(&self, kind: PhaseKind) -> Vec<usize> {
        self.phases.iter().filter(|p| p.kind == kind).map(|p| p.block_size).collect()
    }

    /// Checks ordering, divisibility and the endpoints of each stage.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let kinds: Vec<PhaseKind> = self.phases.iter().map(|p| p.kind).collect();
        let mut sorted = kinds.clone();
        sorted.sort_by_key(|k| *k as u8);
        if kinds != sorted {
            return bad("phases must be ordered warmup, stable, decay".into());
        }
        for p in &self.phases {
            if p.block_size == 0 || self.seq_len % p.block_size != 0 {
                return bad(format!("block size {} does not divide {}", p.block_size, self.seq_len));
            }
        }
        let warm = self.sizes(PhaseKind::Warmup);
        let decay = self.sizes(PhaseKind::Decay);
        if warm.windows(2).any(|w| w[0] >= w[1]) || warm.last().is_some_and(|&b| b != self.seq_len) {
            return bad("warmup block sizes must strictly increase to the sequence length".into());
        }
        if decay.windows(2).any(|w| w[0] <= w[1]) || decay.last().is_some_and(|&b| b != self.final_block_size) {
            return bad("decay block sizes must strictly decrease to the final block size".into());
        }
        if self.sizes(PhaseKind::Stable).iter().any(|&b| b != self.seq_len) {
            return bad("the stable phase runs at the full sequence length".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub path: String,
    pub step: usize,
    /// Validation loss (negative ELBO per token); lower is better.
    pub validation_elbo: f64,
}

/// The `k` lowest-loss candidates; ties go to the later step.
pub fn select_top_k(candidates: &[CheckpointMeta], k: usize) -> Result<Vec<CheckpointMeta>> {
    if k > candidates.len() {
        return Err(contract(format!("cannot select {k} of {} checkpoints", candidates.len())));
    }
    if let Some(c) = candidates.iter().find(|c| !c.validation_elbo.is_finite()) {
        return Err(Error::NonFinite(format!("validation score of {}", c.path)));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.validation_elbo.total_cmp(&b.validation_elbo).then(b.step.cmp(&a.step)));
    sorted.truncate(k);
    Ok(sorted)
}

/// Elementwise arithmetic mean, computed in `f64` as `min + mean(x - min)`
/// over members sorted by value: identical members merge to themselves
/// exactly and the result does not depend on input order.
pub fn merge_checkpoints<T: Real>(members: &[DenoiserParams<T>]) -> Result<DenoiserParams<T>> {
    let first = members.first().ok_or_else(|| contract("nothing to merge"))?;
    for (i, m) in members.iter().enumerate().skip(1) {
        if m.config() != first.config() {
            return Err(Error::Merge {
                tensor: String::from("<config>"),
                reason: format!("member {i} has a different model configuration"),
            });
        }
        for ((na, ta), (nb, tb)) in first.tensors().iter().zip(m.tensors()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Merge {
                    tensor: nb.clone(),
                    reason: format!("member {i} has {:?}, expected `{na}` {:?}", tb.shape(), ta.shape()),
                });
            }
        }
    }
    let n = members.len() as f64;
    let mut out = first.clone();
    let mut scratch = vec![0.0f64; members.len()];
    for (ti, (_, t)) in out.tensors().to_vec().iter().enumerate() {
        let mut data = vec![T::zero(); t.len()];
        for (e, slot) in data.iter_mut().enumerate() {
            for (s, m) in scratch.iter_mut().zip(members) {
                *s = m.tensors()[ti].1.data()[e].as_f64();
            }
            scratch.sort_by(f64::total_cmp);
            let base = scratch[0];
            *slot = T::lit(base + scratch.iter().map(|&x| x - base).sum::<f64>() / n);
        }
        let name = out.tensors()[ti].0.clone();
        out.get_mut(&name).expect("same names").data_mut().copy_from_slice(&data);
    }
    out.zero_grads();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn wsd_examples() {
        let s = BlockSchedule::default_wsd(256, 8, 1000).unwrap();
        assert_eq!(s.sizes(PhaseKind::Warmup), [1, 4, 16, 64, 256]);
        assert_eq!(s.sizes(PhaseKind::Stable), [256]);
        assert_eq!(s.sizes(PhaseKind::Decay), [64, 8]);
        let budgets: Vec<usize> = s.phases.iter().map(|p| p.token_budget).collect();
        assert_eq!(budgets, [50, 50, 50, 50, 100, 500, 100, 100]);

        let s = BlockSchedule::default_wsd(4096, 32, 1).unwrap();
        assert_eq!(s.sizes(PhaseKind::Warmup), [1, 4, 32, 64, 4096]);

        let s = BlockSchedule::default_wsd(8, 8, 1).unwrap();
        assert_eq!(s.sizes(PhaseKind::Warmup), [1, 8]);
        assert_eq!(s.sizes(PhaseKind::Stable), [8]);
        assert_eq!(s.sizes(PhaseKind::Decay), [8]);

        assert!(BlockSchedule::default_wsd(256, 7, 1).is_err());
    }

    proptest! {
        #[test]
        fn wsd_always_valid(exp in 0u32..13, fexp in 0u32..13) {
            let l = 1usize << exp;
            let f = 1usize << fexp.min(exp);
            let s = BlockSchedule::default_wsd(l, f, 10_000).unwrap();
            prop_assert!(s.validate().is_ok());
            prop_assert_eq!(s.sizes(PhaseKind::Warmup)[0], 1);
        }
    }

    fn meta(step: usize, e: f64) -> CheckpointMeta {
        CheckpointMeta {
            path: format!("c{step}"),
            step,
            validation_elbo: e,
        }
    }

    #[test]
    fn top_k_examples() {
        let c = [meta(1, 1.2), meta(2, 0.9), meta(3, 1.5)];
        let steps: Vec<usize> = select_top_k(&c, 2).unwrap().iter().map(|m| m.step).collect();
        assert_eq!(steps, [2, 1]);
        assert_eq!(select_top_k(&c, 3).unwrap().len(), 3);
        assert!(select_top_k(&c, 4).is_err());
        let tie = [meta(100, 1.0), meta(200, 1.0)];
        assert_eq!(select_top_k(&tie, 1).unwrap()[0].step, 200);
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn merge_examples() {
        let a = DenoiserParams::<f64>::init(tiny(), 1).unwrap();
        let same = merge_checkpoints(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same.tensors(), a.tensors());

        let mut z = a.clone();
        let mut two = a.clone();
        z.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        two.tensors_mut().for_each(|t| t.data_mut().fill(2.0));
        let m = merge_checkpoints(&[z, two]).unwrap();
        assert!(m.tensors().iter().all(|(_, t)| t.data().iter().all(|&x| x == 1.0)));

        let b = DenoiserParams::<f64>::init(tiny(), 2).unwrap();
        let c = DenoiserParams::<f64>::init(tiny(), 3).unwrap();
        let abc = merge_checkpoints(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cab = merge_checkpoints(&[c, a.clone(), b]).unwrap();
        assert_eq!(abc.tensors(), cab.tensors());

        let other = DenoiserParams::<f64>::init(ModelConfig { d_ff: 16, ..tiny() }, 1).unwrap();
        match merge_checkpoints(&[a, other]) {
            Err(Error::Merge { .. }) => {}
            e => panic!("expected merge error, got {e:?}"),
        }
    }
}
