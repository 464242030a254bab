//! Adaptive block compressive sensing.
//!
//! The crate covers the full pipeline: block sampling with a single shared
//! measurement matrix whose row prefixes serve every per-block budget,
//! sparsity-driven measurement allocation, measurement-consistency
//! projections (per block and multi-channel), a U-shaped window-attention
//! reconstructor built on a small reverse-mode autodiff engine, a toy
//! trainer, an ISTA baseline, quality metrics and the `ics` command line.

pub mod cli;
pub mod dct;
pub mod error;
pub mod gradsuite;
pub mod image;
pub mod io;
pub mod ista;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod projection;
pub mod rng;
pub mod sampling;
pub mod sparsity;
pub mod synthetic;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
