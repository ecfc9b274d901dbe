//! Attention-guided adaptive token pruning for vision transformers.
//!
//! The crate bundles a small tensor engine with reverse-mode differentiation
//! ([`numerics`]), a configurable ViT that exposes attention probabilities
//! and accepts token masks mid-network ([`model`]), token scoring and
//! selection ([`sparsifier`]), dense/sparse alternating training with token
//! distillation ([`trainer`]), FLOP/density/throughput analysis
//! ([`analysis`]) and file formats plus the command-line front end ([`io`],
//! [`cli`]).

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod sparsifier;
pub mod trainer;

pub use error::{Error, Result};
