//! Unsupervised learning of retrieval-adapted feature representations via
//! diffusion-based ranking on a latent feature manifold.
//!
//! The library jointly optimizes a feedforward encoder and a matrix of
//! per-sample "intrinsic" features under a latent manifold ranking loss,
//! then extracts embedded, diffused, or fused features for distance-based
//! retrieval. A classical full-graph manifold ranking baseline and a mean
//! average precision evaluator round out the pipeline.
//!
//! See the `book/` directory for a guided tour; its code snippets compile
//! and run as doctests of the companion `dd-book` crate.

pub mod baseline;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod extract;
mod fastlog;
pub mod loss;
pub mod manifold;
pub mod matrix;
pub mod train;

pub use error::{DdError, Result};
