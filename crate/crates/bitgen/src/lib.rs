//! Generative language modeling over binary token codes.
//!
//! Tokens are points on a {-1,+1}^B hypercube rather than rows of an
//! embedding table. A block-causal transformer summarizes the prefix, and a
//! small conditional denoiser realizes the next m tokens jointly by
//! iterative refinement, so decoding costs one backbone call per block
//! instead of one per token.
//!
//! The crate runs every model in either f32 (training speed) or f64
//! (verification) through the [`tensor::Scalar`] generic.

pub mod backbone;
pub mod bench;
pub mod codec;
pub mod config;
pub mod error;
pub mod grammar;
pub mod head;
pub mod optim;
pub mod sample;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
