//! Keyword-spotting core: a small reverse-mode autodiff engine, an MFCC
//! front-end, the LG-Net model (temporal convolution + self-attention
//! residual blocks), text-anchor triplet metric learning, the two-stage
//! trainer and the accuracy / FRR-at-FAR evaluator.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, dataset
//! ingestion and the command-line driver live in the `kws` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod anchors;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod metric;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
