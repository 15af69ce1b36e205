//! Length quantization and first-fit packing of documents into fixed rows.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::mask::PackedLayout;
use crate::vocab::{encode, Token, EOS, MASK, PAD};

/// Smallest multiple of `block_size` that is at least `n`.
pub fn quantize_length(n: usize, block_size: usize) -> Result<usize> {
    if n == 0 || block_size == 0 {
        return Err(contract("quantize_length needs n >= 1 and block size >= 1"));
    }
    Ok(n.div_ceil(block_size) * block_size)
}

/// Fixed-length rows of packed documents.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub tokens: Vec<Vec<Token>>,
    pub layouts: Vec<PackedLayout>,
    /// Positions that may be noised and supervised: real tokens outside prompts.
    pub loss_mask: Vec<Vec<bool>>,
}

impl PackedBatch {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn row_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn supervised_tokens(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&b| b).count()
    }

    /// Rows `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> PackedBatch {
        PackedBatch {
            tokens: idx.iter().map(|&i| self.tokens[i].clone()).collect(),
            layouts: idx.iter().map(|&i| self.layouts[i].clone()).collect(),
            loss_mask: idx.iter().map(|&i| self.loss_mask[i].clone()).collect(),
        }
    }

    /// Same rows re-blocked at `block_size`.
    pub fn with_block_size(&self, block_size: usize) -> Result<PackedBatch> {
        Ok(PackedBatch {
            tokens: self.tokens.clone(),
            layouts: self
                .layouts
                .iter()
                .map(|l| l.with_block_size(block_size))
                .collect::<Result<_>>()?,
            loss_mask: self.loss_mask.clone(),
        })
    }

    pub fn concat(mut self, other: PackedBatch) -> PackedBatch {
        self.tokens.extend(other.tokens);
        self.layouts.extend(other.layouts);
        self.loss_mask.extend(other.loss_mask);
        self
    }
}

struct RowBuilder {
    tokens: Vec<Token>,
    spans: Vec<(usize, usize)>,
    prompts: Vec<usize>,
    loss: Vec<bool>,
}

impl RowBuilder {
    fn new() -> Self {
        RowBuilder {
            tokens: Vec::new(),
            spans: Vec::new(),
            prompts: Vec::new(),
            loss: Vec::new(),
        }
    }

    fn push(&mut self, piece: &Piece) {
        let start = self.tokens.len();
        self.tokens.extend_from_slice(&piece.tokens);
        self.loss.extend_from_slice(&piece.loss);
        self.spans.push((start, self.tokens.len()));
        self.prompts.push(piece.prompt_len);
    }

    fn finish(mut self, row_len: usize, block_size: usize, with_prompts: bool) -> Result<(Vec<Token>, PackedLayout, Vec<bool>)> {
        let used = self.tokens.len();
        if used < row_len {
            self.tokens.resize(row_len, PAD);
            self.loss.resize(row_len, false);
            self.spans.push((used, row_len));
            self.prompts.push(0);
        }
        let layout = if with_prompts {
            PackedLayout::with_prompts(row_len, self.spans, self.prompts, block_size)?
        } else {
            PackedLayout::new(row_len, self.spans, block_size)?
        };
        Ok((self.tokens, layout, self.loss))
    }
}

struct Piece {
    tokens: Vec<Token>,
    loss: Vec<bool>,
    prompt_len: usize,
}

fn first_fit(pieces: Vec<Piece>, row_len: usize, block_size: usize, with_prompts: bool) -> Result<PackedBatch> {
    let mut rows: Vec<RowBuilder> = Vec::new();
    for piece in &pieces {
        let need = piece.tokens.len();
        match rows.iter_mut().find(|r| r.tokens.len() + need <= row_len) {
            Some(row) => row.push(piece),
            None => {
                let mut row = RowBuilder::new();
                row.push(piece);
                rows.push(row);
            }
        }
    }
    let mut out = PackedBatch {
        tokens: Vec::new(),
        layouts: Vec::new(),
        loss_mask: Vec::new(),
    };
    for row in rows {
        let (t, l, m) = row.finish(row_len, block_size, with_prompts)?;
        out.tokens.push(t);
        out.layouts.push(l);
        out.loss_mask.push(m);
    }
    Ok(out)
}

/// Packs documents into rows of `row_len` tokens with greedy first fit.
///
/// Each document is padded with PAD up to a multiple of `block_size`.
/// Documents longer than `row_len` are cut into `row_len`-sized chunks and
/// every chunk becomes its own document. Unused row space becomes a trailing
/// PAD-only span that is excluded from the loss.
pub fn pack_documents(docs: &[Vec<Token>], row_len: usize, block_size: usize) -> Result<PackedBatch> {
    if block_size == 0 || row_len == 0 || row_len % block_size != 0 {
        return Err(contract(alloc::format!(
            "row length {row_len} must be a positive multiple of block size {block_size}"
        )));
    }
    let mut pieces = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        if doc.is_empty() {
            return Err(contract(alloc::format!("document {i} is empty")));
        }
        if doc.contains(&MASK) {
            return Err(contract(alloc::format!("document {i} contains the reserved MASK id")));
        }
        for chunk in doc.chunks(row_len) {
            let padded = quantize_length(chunk.len(), block_size)?;
            let mut tokens = chunk.to_vec();
            let mut loss: Vec<bool> = chunk.iter().map(|&t| t != PAD).collect();
            tokens.resize(padded, PAD);
            loss.resize(padded, false);
            pieces.push(Piece {
                tokens,
                loss,
                prompt_len: 0,
            });
        }
    }
    first_fit(pieces, row_len, block_size, false)
}

/// A prompt with a response, optionally with a rejected alternative response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub prompt: Vec<Token>,
    /// The supervised response, or the chosen response for preference data.
    pub response: Vec<Token>,
    pub rejected: Option<Vec<Token>>,
}

impl PairExample {
    /// Byte-tokenizes and appends EOS to each response.
    pub fn from_text(prompt: &str, response: &str, rejected: Option<&str>) -> Result<Self> {
        let with_eos = |s: &str| {
            let mut t = encode(s.as_bytes());
            t.push(EOS);
            t
        };
        let ex = PairExample {
            prompt: encode(prompt.as_bytes()),
            response: with_eos(response),
            rejected: rejected.map(with_eos),
        };
        if ex.prompt.is_empty() {
            return Err(contract("prompt must be non-empty"));
        }
        Ok(ex)
    }

    pub fn chosen(&self) -> &[Token] {
        &self.response
    }
}

/// One conditional sequence: `prompt` followed by `response` padded to a
/// multiple of `block_size`.
pub fn conditional_piece_len(prompt_len: usize, response_len: usize, block_size: usize) -> Result<usize> {
    Ok(prompt_len + quantize_length(response_len, block_size)?)
}

/// Packs prompt/response pairs for conditional training. Prompts are never
/// supervised; each prompt forms its own leading block.
pub fn pack_pairs<'a, I>(pairs: I, row_len: usize, block_size: usize) -> Result<PackedBatch>
where
    I: IntoIterator<Item = (&'a [Token], &'a [Token])>,
{
    let mut pieces = Vec::new();
    for (i, (prompt, response)) in pairs.into_iter().enumerate() {
        if response.is_empty() {
            return Err(contract(alloc::format!("pair {i} has an empty response")));
        }
        let total = conditional_piece_len(prompt.len(), response.len(), block_size)?;
        if total > row_len {
            return Err(contract(alloc::format!(
                "pair {i} needs {total} positions but rows hold {row_len}"
            )));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(response);
        let mut loss = vec![false; prompt.len()];
        loss.extend(response.iter().map(|&t| t != PAD));
        tokens.resize(total, PAD);
        loss.resize(total, false);
        pieces.push(Piece {
            tokens,
            loss,
            prompt_len: prompt.len(),
        });
    }
    first_fit(pieces, row_len, block_size, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_length(33, 32).unwrap(), 64);
        assert_eq!(quantize_length(32, 32).unwrap(), 32);
        assert_eq!(quantize_length(1, 4096).unwrap(), 4096);
        assert!(quantize_length(0, 4).is_err());
    }

    #[test]
    fn two_docs_share_a_row() {
        let b = pack_documents(&[vec![1; 8], vec![2; 8]], 16, 8).unwrap();
        assert_eq!(b.rows(), 1);
        assert_eq!(b.layouts[0].doc_spans(), &[(0, 8), (8, 16)]);
    }

    #[test]
    fn long_doc_is_chunked() {
        let b = pack_documents(&[vec![7; 40]], 16, 8).unwrap();
        assert_eq!(b.rows(), 3);
        assert_eq!(b.layouts[0].doc_spans(), &[(0, 16)]);
        assert_eq!(b.layouts[1].doc_spans(), &[(0, 16)]);
        // third chunk of 8 plus a PAD-only tail span
        assert_eq!(b.layouts[2].doc_spans(), &[(0, 8), (8, 16)]);
        assert_eq!(b.supervised_tokens(), 40);
    }

    #[test]
    fn short_doc_gets_pad_tail() {
        let b = pack_documents(&[vec![3; 5]], 16, 4).unwrap();
        assert_eq!(b.rows(), 1);
        assert_eq!(b.layouts[0].doc_spans(), &[(0, 8), (8, 16)]);
        assert_eq!(&b.tokens[0][5..], &[PAD; 11]);
        assert_eq!(b.loss_mask[0].iter().filter(|&&x| x).count(), 5);
    }

    #[test]
    fn first_fit_reuses_earlier_rows() {
        let b = pack_documents(&[vec![1; 12], vec![2; 12], vec![3; 4]], 16, 4).unwrap();
        assert_eq!(b.rows(), 2);
        assert_eq!(b.layouts[0].doc_spans(), &[(0, 12), (12, 16)]);
        assert_eq!(b.tokens[0][12], 3);
    }

    #[test]
    fn pairs_carry_prompts() {
        let ex = PairExample::from_text("2+2=", "4", None).unwrap();
        assert_eq!(ex.prompt.len(), 4);
        assert_eq!(ex.response, vec![b'4' as Token, EOS]);
        let b = pack_pairs([(ex.prompt.as_slice(), ex.response.as_slice())], 16, 4).unwrap();
        assert_eq!(b.layouts[0].prompt_lens(), &[4, 0]);
        assert_eq!(b.layouts[0].doc_spans(), &[(0, 8), (8, 16)]);
        assert_eq!(b.loss_mask[0][..8], [false, false, false, false, true, true, false, false]);
    }

    #[test]
    fn oversize_pair_is_rejected() {
        let p = vec![1; 10];
        let r = vec![2; 10];
        assert!(pack_pairs([(p.as_slice(), r.as_slice())], 16, 4).is_err());
    }

    proptest! {
        #[test]
        fn quantize_properties(n in 1usize..10_000, b in 1usize..512) {
            let q = quantize_length(n, b).unwrap();
            prop_assert!(q >= n);
            prop_assert!(q - n < b);
            prop_assert_eq!(q % b, 0);
        }

        #[test]
        fn packing_conserves_tokens(
            lens in proptest::collection::vec(1usize..70, 1..12),
            log_b in 0u32..4,
        ) {
            let b = 1usize << log_b;
            let row = 32;
            let docs: Vec<Vec<Token>> = lens.iter().enumerate().map(|(i, &n)| vec![i % 200; n]).collect();
            let packed = pack_documents(&docs, row, b).unwrap();
            let non_pad: usize = packed.tokens.iter().flatten().filter(|&&t| t != PAD).count();
            prop_assert_eq!(non_pad, lens.iter().sum::<usize>());
            for (toks, layout) in packed.tokens.iter().zip(&packed.layouts) {
                prop_assert_eq!(toks.len(), row);
                prop_assert_eq!(layout.doc_spans().last().unwrap().1, row);
                prop_assert_eq!(layout.doc_spans()[0].0, 0);
            }
        }
    }
}
