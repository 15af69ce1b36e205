//! Forward corruption: timestep sampling and per-token masking under the
//! linear schedule `alpha_t = 1 - t`.
//!
//! Under this schedule a token is masked with probability `t` and the
//! diffusion time weight `-alpha_t' / (1 - alpha_t)` is `1 / t`.

use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mask::PackedLayout;
use crate::packing::PackedBatch;
use crate::rng::{rng, Rng};
use crate::vocab::{Token, MASK};

/// Timestep sampling bounds and an optional mask-rate band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub t_max: f64,
    /// When set, the realized mask rate of each row is kept inside `[lo, hi]`.
    pub bandwidth: Option<(f64, f64)>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            t_min: 0.02,
            t_max: 1.0,
            bandwidth: None,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min <= self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "noise bounds must satisfy 0 < t_min <= t_max <= 1, got [{}, {}]",
                self.t_min,
                self.t_max
            )));
        }
        if let Some((lo, hi)) = self.bandwidth {
            if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return Err(Error::Config(alloc::format!("invalid mask-rate band [{lo}, {hi}]")));
            }
            if hi < self.t_min || lo > self.t_max {
                return Err(Error::Config(alloc::format!(
                    "mask-rate band [{lo}, {hi}] does not meet t range [{}, {}]",
                    self.t_min,
                    self.t_max
                )));
            }
        }
        Ok(())
    }

    /// Effective sampling interval for `t`.
    pub fn t_range(&self) -> (f64, f64) {
        match self.bandwidth {
            Some((lo, hi)) => (self.t_min.max(lo), self.t_max.min(hi)),
            None => (self.t_min, self.t_max),
        }
    }

    pub fn alpha(t: f64) -> f64 {
        1.0 - t
    }

    /// Masking probability `1 - alpha_t`, which is `t` itself.
    pub fn mask_prob(t: f64) -> f64 {
        t
    }

    pub fn weight(t: f64) -> f64 {
        1.0 / t
    }
}

/// A clean batch and its corrupted copy.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    pub clean: Vec<Vec<Token>>,
    pub noisy: Vec<Vec<Token>>,
    pub is_masked: Vec<Vec<bool>>,
    pub t: Vec<f64>,
    pub weight: Vec<f64>,
    pub layouts: Vec<PackedLayout>,
    pub loss_mask: Vec<Vec<bool>>,
}

impl NoisedBatch {
    pub fn rows(&self) -> usize {
        self.clean.len()
    }

    pub fn row_len(&self) -> usize {
        self.clean.first().map_or(0, Vec::len)
    }

    pub fn masked_count(&self) -> usize {
        self.is_masked.iter().flatten().filter(|&&m| m).count()
    }

    /// Tokens eligible for supervision (the loss normalizer).
    pub fn supervised_tokens(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }

    /// `(row, position)` of every masked token in row-major order.
    pub fn masked_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.masked_count());
        for (r, row) in self.is_masked.iter().enumerate() {
            out.extend(row.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| (r, k)));
        }
        out
    }

    /// Builds a noised batch from explicit masks. Masks outside `loss_mask`
    /// are rejected.
    pub fn from_masks(batch: &PackedBatch, masks: Vec<Vec<bool>>, t: Vec<f64>) -> Result<Self> {
        if masks.len() != batch.rows() || t.len() != batch.rows() {
            return Err(Error::Contract("one mask and one timestep per row".into()));
        }
        for (r, (m, lm)) in masks.iter().zip(&batch.loss_mask).enumerate() {
            if m.len() != lm.len() {
                return Err(Error::Contract(alloc::format!("mask length mismatch in row {r}")));
            }
            if m.iter().zip(lm).any(|(&a, &b)| a && !b) {
                return Err(Error::Contract(alloc::format!(
                    "row {r} masks a PAD or prompt position"
                )));
            }
        }
        if let Some(&bad) = t.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Contract(alloc::format!("timestep {bad} outside (0, 1]")));
        }
        let noisy = batch
            .tokens
            .iter()
            .zip(&masks)
            .map(|(row, m)| row.iter().zip(m).map(|(&tok, &mm)| if mm { MASK } else { tok }).collect())
            .collect();
        Ok(NoisedBatch {
            clean: batch.tokens.clone(),
            noisy,
            is_masked: masks,
            weight: t.iter().map(|&x| NoiseSchedule::weight(x)).collect(),
            t,
            layouts: batch.layouts.clone(),
            loss_mask: batch.loss_mask.clone(),
        })
    }
}

fn bernoulli_mask(eligible: &[bool], t: f64, rng: &mut Rng) -> Vec<bool> {
    eligible.iter().map(|&e| e && rng.random::<f64>() < t).collect()
}

/// Mask with a realized rate inside `[lo, hi]` over the eligible positions.
///
/// Bernoulli draws are retried a bounded number of times; if none lands in
/// the band, exactly `round(t * n)` positions (clamped into the band) are
/// chosen uniformly.
fn banded_mask(eligible: &[bool], t: f64, lo: f64, hi: f64, rng: &mut Rng) -> Vec<bool> {
    let n = eligible.iter().filter(|&&e| e).count();
    if n == 0 {
        return alloc::vec![false; eligible.len()];
    }
    let in_band = |m: &[bool]| {
        let rate = m.iter().filter(|&&x| x).count() as f64 / n as f64;
        rate >= lo && rate <= hi
    };
    for _ in 0..32 {
        let m = bernoulli_mask(eligible, t, rng);
        if in_band(&m) {
            return m;
        }
    }
    let min_k = num_traits::Float::ceil(lo * n as f64) as usize;
    let max_k = num_traits::Float::floor(hi * n as f64) as usize;
    let target = num_traits::Float::round(t * n as f64) as usize;
    let k = if min_k <= max_k { target.clamp(min_k, max_k) } else { target.clamp(1, n) };
    let slots: Vec<usize> = eligible.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i).collect();
    let mut m = alloc::vec![false; eligible.len()];
    for i in index::sample(rng, n, k) {
        m[slots[i]] = true;
    }
    m
}

/// Draws a timestep per row and masks each eligible token with probability `t`.
pub fn sample_noised(batch: &PackedBatch, schedule: &NoiseSchedule, seed: u64) -> Result<NoisedBatch> {
    schedule.validate()?;
    let mut r = rng(seed);
    let (lo_t, hi_t) = schedule.t_range();
    let mut ts = Vec::with_capacity(batch.rows());
    let mut masks = Vec::with_capacity(batch.rows());
    for eligible in &batch.loss_mask {
        let t = if hi_t > lo_t { r.random_range(lo_t..=hi_t) } else { lo_t };
        let m = match schedule.bandwidth {
            Some((lo, hi)) => banded_mask(eligible, t, lo, hi, &mut r),
            None => bernoulli_mask(eligible, t, &mut r),
        };
        ts.push(t);
        masks.push(m);
    }
    NoisedBatch::from_masks(batch, masks, ts)
}

/// Masks every eligible token independently with a fixed per-row `t`.
pub fn sample_noised_at(batch: &PackedBatch, t: &[f64], seed: u64) -> Result<NoisedBatch> {
    let mut r = rng(seed);
    let masks = batch
        .loss_mask
        .iter()
        .zip(t)
        .map(|(e, &tt)| if tt >= 1.0 { e.clone() } else { bernoulli_mask(e, tt, &mut r) })
        .collect();
    NoisedBatch::from_masks(batch, masks, t.to_vec())
}

/// A mask drawn at `t` and its logical inverse over the eligible positions.
/// The inverse masks a `1 - t` fraction in expectation and carries that
/// timestep: each half is a draw at its own noise level.
///
/// A draw where either half would be empty in every row is redrawn once;
/// a second failure rejects the batch with [`Error::NothingMasked`].
pub fn complementary_pair(batch: &PackedBatch, t: f64, seed: u64) -> Result<(NoisedBatch, NoisedBatch)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Contract(alloc::format!("complementary masking needs t in (0, 1), got {t}")));
    }
    let mut r = rng(seed);
    for _attempt in 0..2 {
        let first: Vec<Vec<bool>> = batch.loss_mask.iter().map(|e| bernoulli_mask(e, t, &mut r)).collect();
        let second: Vec<Vec<bool>> = first
            .iter()
            .zip(&batch.loss_mask)
            .map(|(m, e)| m.iter().zip(e).map(|(&a, &b)| b && !a).collect())
            .collect();
        let empty = |ms: &[Vec<bool>]| !ms.iter().flatten().any(|&x| x);
        if empty(&first) || empty(&second) {
            continue;
        }
        return Ok((
            NoisedBatch::from_masks(batch, first, alloc::vec![t; batch.rows()])?,
            NoisedBatch::from_masks(batch, second, alloc::vec![1.0 - t; batch.rows()])?,
        ));
    }
    Err(Error::NothingMasked)
}

/// Complementary pair with an explicit first mask.
pub fn complementary_from_mask(batch: &PackedBatch, first: Vec<Vec<bool>>, t: f64) -> Result<(NoisedBatch, NoisedBatch)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Contract(alloc::format!("complementary masking needs t in (0, 1), got {t}")));
    }
    let second: Vec<Vec<bool>> = first
        .iter()
        .zip(&batch.loss_mask)
        .map(|(m, e)| m.iter().zip(e).map(|(&a, &b)| b && !a).collect())
        .collect();
    Ok((
        NoisedBatch::from_masks(batch, first, alloc::vec![t; batch.rows()])?,
        NoisedBatch::from_masks(batch, second, alloc::vec![1.0 - t; batch.rows()])?,
    ))
}
