//! Block-diffusion language modelling on tiny byte-level transformers.
//!
//! This crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! pipeline: a reverse-mode autodiff tape, the document-aware block-diffusion
//! attention masks, the forward noising process, the denoiser, all training
//! objectives, the block-size schedule and checkpoint merge, the optimizer,
//! and the threshold-based parallel block decoder. File formats, corpus
//! loading and the command line live in the `bdlm` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod decode;
pub mod error;
pub mod graph;
mod kernels;
pub mod losses;
pub mod mask;
pub mod model;
pub mod noising;
pub mod optim;
pub mod packing;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{AttnSegment, Graph, Var};
pub use mask::{build_bdlm_mask, build_decode_mask, build_mdlm_mask, AttentionMask, MaskKind, PackedLayout};
pub use real::{Precision, Real};
pub use tensor::Tensor;
