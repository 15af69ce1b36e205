//! Attention masks for block-diffusion and masked-diffusion training and decoding.
//!
//! The block-diffusion training mask is defined over a concatenated row of
//! length `2L`: the noisy copy `x_t` occupies indices `[0, L)` and the clean
//! copy `x_0` occupies `[L, 2L)`. With `b(k)` the block id of position `k`:
//!
//! | query \ key | `x_t`            | `x_0`              |
//! |-------------|------------------|--------------------|
//! | `x_t`       | `b(i) == b(j)`   | `b(i) > b(j - L)`  |
//! | `x_0`       | never            | `b(i-L) >= b(j-L)` |
//!
//! and every entry whose positions fall in different documents is zero.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};

/// Block id of position `k` for block size `block_size`.
pub fn block_index(k: usize, block_size: usize) -> Result<usize> {
    if block_size == 0 {
        return Err(contract("block size must be at least 1"));
    }
    Ok(k / block_size)
}

/// Which training or decoding regime a mask was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    BdlmTrain,
    MdlmTrain,
    Decode,
}

/// Boolean square attention mask. `allowed(i, j)` means query `i` may attend key `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    dim: usize,
    bits: Vec<bool>,
    kind: MaskKind,
    // Allowed keys of each row as half-open runs, used by the attention kernels.
    row_start: Vec<usize>,
    runs: Vec<(usize, usize)>,
}

impl AttentionMask {
    pub fn from_bits(dim: usize, bits: Vec<bool>, kind: MaskKind) -> Result<Self> {
        if bits.len() != dim * dim {
            return Err(Error::Shape {
                op: "attention_mask",
                lhs: vec![dim, dim],
                rhs: vec![bits.len()],
            });
        }
        let mut row_start = Vec::with_capacity(dim + 1);
        let mut runs = Vec::new();
        for i in 0..dim {
            row_start.push(runs.len());
            let row = &bits[i * dim..(i + 1) * dim];
            let mut j = 0;
            while j < dim {
                if row[j] {
                    let s = j;
                    while j < dim && row[j] {
                        j += 1;
                    }
                    runs.push((s, j));
                } else {
                    j += 1;
                }
            }
        }
        row_start.push(runs.len());
        Ok(AttentionMask {
            dim,
            bits,
            kind,
            row_start,
            runs,
        })
    }

    pub fn from_fn(dim: usize, kind: MaskKind, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = vec![false; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                bits[i * dim + j] = f(i, j);
            }
        }
        Self::from_bits(dim, bits, kind).expect("square by construction")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.dim + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.dim..(i + 1) * self.dim]
    }

    /// Allowed key runs `[start, end)` for query row `i`, ascending.
    #[inline]
    pub fn runs(&self, i: usize) -> &[(usize, usize)] {
        &self.runs[self.row_start[i]..self.row_start[i + 1]]
    }

    pub fn allowed_count(&self, i: usize) -> usize {
        self.runs(i).iter().map(|(s, e)| e - s).sum()
    }

    /// Renders the mask as a grid of `0`/`1` characters, one row per line.
    pub fn to_grid(&self) -> String {
        let mut out = String::with_capacity(self.dim * (self.dim + 1));
        for i in 0..self.dim {
            for &b in self.row(i) {
                out.push(if b { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_grid(grid: &str, kind: MaskKind) -> Result<Self> {
        let rows: Vec<&str> = grid.lines().filter(|l| !l.is_empty()).collect();
        let dim = rows.len();
        let mut bits = Vec::with_capacity(dim * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(contract(alloc::format!(
                    "grid row {i} has {} columns, expected {dim}",
                    row.len()
                )));
            }
            for c in row.chars() {
                match c {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => {
                        return Err(contract(alloc::format!(
                            "unexpected character {other:?} in grid row {i}"
                        )))
                    }
                }
            }
        }
        Self::from_bits(dim, bits, kind)
    }
}

/// Document and block structure of one packed row.
///
/// Documents partition `[0, total_length)`. A document may start with a
/// prompt prefix; the prefix then forms its own leading block and the
/// remaining positions are blocked relative to the end of the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedLayout {
    total_length: usize,
    doc_spans: Vec<(usize, usize)>,
    prompt_lens: Vec<usize>,
    block_size: usize,
}

impl PackedLayout {
    /// Layout with plain documents, blocked at absolute positions.
    pub fn new(total_length: usize, doc_spans: Vec<(usize, usize)>, block_size: usize) -> Result<Self> {
        let prompts = vec![0; doc_spans.len()];
        let layout = PackedLayout {
            total_length,
            doc_spans,
            prompt_lens: prompts,
            block_size,
        };
        layout.validate()?;
        if total_length % block_size != 0 {
            return Err(contract(alloc::format!(
                "sequence length {total_length} is not divisible by block size {block_size}"
            )));
        }
        Ok(layout)
    }

    /// Layout where each document carries a prompt prefix of the given length.
    pub fn with_prompts(
        total_length: usize,
        doc_spans: Vec<(usize, usize)>,
        prompt_lens: Vec<usize>,
        block_size: usize,
    ) -> Result<Self> {
        if prompt_lens.len() != doc_spans.len() {
            return Err(contract("one prompt length per document is required"));
        }
        let layout = PackedLayout {
            total_length,
            doc_spans,
            prompt_lens,
            block_size,
        };
        layout.validate()?;
        for (d, (&(s, e), &p)) in layout.doc_spans.iter().zip(&layout.prompt_lens).enumerate() {
            if p > e - s {
                return Err(contract(alloc::format!("prompt of document {d} exceeds its span")));
            }
        }
        Ok(layout)
    }

    /// A single document covering the whole row.
    pub fn single(total_length: usize, block_size: usize) -> Result<Self> {
        Self::new(total_length, vec![(0, total_length)], block_size)
    }

    fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(contract("block size must be at least 1"));
        }
        if self.total_length == 0 {
            return Err(contract("layout must cover at least one position"));
        }
        let mut cursor = 0;
        for &(s, e) in &self.doc_spans {
            if s != cursor || e <= s {
                return Err(contract(alloc::format!(
                    "document spans must partition [0, {}) in order; bad span ({s}, {e})",
                    self.total_length
                )));
            }
            cursor = e;
        }
        if cursor != self.total_length {
            return Err(contract(alloc::format!(
                "document spans end at {cursor}, expected {}",
                self.total_length
            )));
        }
        Ok(())
    }

    pub fn total_length(&self) -> usize {
        self.total_length
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn doc_spans(&self) -> &[(usize, usize)] {
        &self.doc_spans
    }

    pub fn prompt_lens(&self) -> &[usize] {
        &self.prompt_lens
    }

    pub fn has_prompts(&self) -> bool {
        self.prompt_lens.iter().any(|&p| p > 0)
    }

    /// Number of blocks `K = L / L_B` for prompt-free layouts.
    pub fn num_blocks(&self) -> usize {
        self.total_length.div_ceil(self.block_size)
    }

    /// Same layout at another block size.
    pub fn with_block_size(&self, block_size: usize) -> Result<Self> {
        if self.has_prompts() {
            Self::with_prompts(
                self.total_length,
                self.doc_spans.clone(),
                self.prompt_lens.clone(),
                block_size,
            )
        } else {
            Self::new(self.total_length, self.doc_spans.clone(), block_size)
        }
    }

    /// Per-position `(document, block)` ids.
    pub fn position_ids(&self) -> (Vec<usize>, Vec<usize>) {
        let mut doc = vec![0; self.total_length];
        let mut block = vec![0; self.total_length];
        for (d, (&(s, e), &p)) in self.doc_spans.iter().zip(&self.prompt_lens).enumerate() {
            for k in s..e {
                doc[k] = d;
                block[k] = if p == 0 {
                    k / self.block_size
                } else if k < s + p {
                    0
                } else {
                    1 + (k - s - p) / self.block_size
                };
            }
        }
        (doc, block)
    }

    /// Whether position `k` is inside a prompt prefix.
    pub fn prompt_flags(&self) -> Vec<bool> {
        let mut out = vec![false; self.total_length];
        for (&(s, _), &p) in self.doc_spans.iter().zip(&self.prompt_lens) {
            out[s..s + p].iter_mut().for_each(|f| *f = true);
        }
        out
    }
}

/// The `2L x 2L` block-diffusion training mask over `[x_t; x_0]`.
pub fn build_bdlm_mask(layout: &PackedLayout) -> AttentionMask {
    let l = layout.total_length();
    let (doc, block) = layout.position_ids();
    AttentionMask::from_fn(2 * l, MaskKind::BdlmTrain, |i, j| {
        let (pi, noisy_i) = if i < l { (i, true) } else { (i - l, false) };
        let (pj, noisy_j) = if j < l { (j, true) } else { (j - l, false) };
        if doc[pi] != doc[pj] {
            return false;
        }
        match (noisy_i, noisy_j) {
            (true, true) => block[pi] == block[pj],
            (true, false) => block[pi] > block[pj],
            (false, false) => block[pi] >= block[pj],
            (false, true) => false,
        }
    })
}

/// The `L x L` masked-diffusion mask: full attention inside each document.
pub fn build_mdlm_mask(layout: &PackedLayout) -> AttentionMask {
    let (doc, _) = layout.position_ids();
    AttentionMask::from_fn(layout.total_length(), MaskKind::MdlmTrain, |i, j| doc[i] == doc[j])
}

/// Mask for decoding one block after a prompt and `finalized_blocks` full blocks.
pub fn build_decode_mask(prompt_len: usize, finalized_blocks: usize, block_size: usize) -> Result<AttentionMask> {
    if block_size == 0 {
        return Err(contract("block size must be at least 1"));
    }
    Ok(decode_mask(prompt_len, finalized_blocks * block_size, block_size, block_size))
}

/// Decode mask over `prompt_len + finalized_len + active_len` positions.
///
/// The prompt attends to itself bidirectionally, finalized tokens attend
/// block-causally (their own block and everything before it), and the active
/// block attends to everything.
pub fn decode_mask(prompt_len: usize, finalized_len: usize, block_size: usize, active_len: usize) -> AttentionMask {
    let dim = prompt_len + finalized_len + active_len;
    let group = |k: usize| -> usize {
        if k < prompt_len {
            0
        } else if k < prompt_len + finalized_len {
            1 + (k - prompt_len) / block_size
        } else {
            usize::MAX
        }
    };
    AttentionMask::from_fn(dim, MaskKind::Decode, |i, j| {
        let gi = group(i);
        gi == usize::MAX || group(j) <= gi
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_index_examples() {
        assert_eq!(block_index(5, 2).unwrap(), 2);
        assert_eq!(block_index(0, 7).unwrap(), 0);
        assert_eq!(block_index(4095, 4096).unwrap(), 0);
        assert_eq!(block_index(4096, 4096).unwrap(), 1);
        assert!(block_index(3, 0).is_err());
    }

    #[test]
    fn bdlm_mask_spot_entries() {
        let layout = PackedLayout::single(4, 2).unwrap();
        let m = build_bdlm_mask(&layout);
        assert_eq!(m.dim(), 8);
        assert!(m.allowed(2, 4));
        assert!(!m.allowed(0, 5));
        for i in 4..8 {
            for j in 0..4 {
                assert!(!m.allowed(i, j));
            }
        }
    }

    #[test]
    fn full_block_is_mdlm_limit() {
        let layout = PackedLayout::single(6, 6).unwrap();
        let m = build_bdlm_mask(&layout);
        for i in 0..6 {
            for j in 0..6 {
                assert!(m.allowed(i, j));
                assert!(!m.allowed(i, j + 6));
            }
        }
    }

    #[test]
    fn cross_document_entries_are_zero() {
        let layout = PackedLayout::new(8, vec![(0, 4), (4, 8)], 2).unwrap();
        let m = build_bdlm_mask(&layout);
        // x_t block 2 (doc 1) may see x_0 blocks 0..2 only inside doc 1, i.e. none.
        assert!(!m.allowed(4, 8));
        assert!(!m.allowed(4, 9));
        assert!(m.allowed(6, 12));
    }

    #[test]
    fn mdlm_mask_examples() {
        let m = build_mdlm_mask(&PackedLayout::new(4, vec![(0, 2), (2, 4)], 2).unwrap());
        assert_eq!(m.to_grid(), "1100\n1100\n0011\n0011\n");
        let m = build_mdlm_mask(&PackedLayout::single(4, 4).unwrap());
        assert!(m.bits().iter().all(|&b| b));
        let m = build_mdlm_mask(&PackedLayout::new(4, vec![(0, 3), (3, 4)], 1).unwrap());
        assert!(!m.allowed(2, 3));
    }

    #[test]
    fn decode_mask_counts() {
        let m = build_decode_mask(3, 0, 2).unwrap();
        assert_eq!(m.dim(), 5);
        assert_eq!(m.allowed_count(3), 5);
        assert_eq!(m.allowed_count(4), 5);
        let m = build_decode_mask(3, 1, 2).unwrap();
        assert_eq!(m.allowed_count(6), 7);
        // prompt rows see only the prompt
        assert_eq!(m.allowed_count(0), 3);
    }

    #[test]
    fn decode_mask_block_one_is_causal() {
        let m = build_decode_mask(0, 4, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allowed(i, j), j <= i, "({i},{j})");
            }
        }
    }

    #[test]
    fn grid_round_trip() {
        let m = build_bdlm_mask(&PackedLayout::new(6, vec![(0, 2), (2, 6)], 2).unwrap());
        let back = AttentionMask::from_grid(&m.to_grid(), MaskKind::BdlmTrain).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn runs_match_bits() {
        let m = build_bdlm_mask(&PackedLayout::new(8, vec![(0, 4), (4, 8)], 2).unwrap());
        for i in 0..m.dim() {
            let mut from_runs = vec![false; m.dim()];
            for &(s, e) in m.runs(i) {
                from_runs[s..e].iter_mut().for_each(|b| *b = true);
            }
            assert_eq!(from_runs.as_slice(), m.row(i));
        }
    }

    #[test]
    fn prompt_layout_blocks() {
        let layout = PackedLayout::with_prompts(7, vec![(0, 7)], vec![3], 2).unwrap();
        let (_, block) = layout.position_ids();
        assert_eq!(block, vec![0, 0, 0, 1, 1, 2, 2]);
        let m = build_bdlm_mask(&layout);
        // first response block in x_t sees the clean prompt but not itself in x_0
        assert!(m.allowed(3, 7));
        assert!(!m.allowed(3, 10));
        assert!(m.allowed(5, 10));
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(PackedLayout::new(6, vec![(0, 6)], 4).is_err());
        assert!(PackedLayout::new(4, vec![(0, 2), (3, 4)], 1).is_err());
        assert!(PackedLayout::new(4, vec![(0, 2)], 1).is_err());
    }
}
