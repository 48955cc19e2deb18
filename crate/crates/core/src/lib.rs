//! Data-free compression of fine-tuning deltas.
//!
//! A fine-tuned checkpoint is stored as its base checkpoint plus a compressed
//! delta. The main method quantizes the delta to `α·Sign(Δ)` and keeps a
//! truncated SVD of the quantization residual; pruning, SVD-only and
//! one-bit-only baselines share the same container and accounting.

pub mod archive;
pub mod compress;
pub mod container;
pub mod error;
pub mod fraction;
pub mod linalg;
pub mod reconstruct;
pub mod selftest;
pub mod stats;

pub use error::{Error, Result};
