//! Lookahead parallel decoding for masked (diffusion-style) language models,
//! run against exactly solvable surrogate models.
//!
//! - [`types`]: sequences, branches, configs, metrics.
//! - [`model`]: predictors (exact HMM marginals, scripted fixtures).
//! - [`decode`]: threshold decoding and lookahead branch search.
//! - [`blockpipe`]: block-pipelined windows for decoding.
//! - [`bpsim`]: multi-device branch-parallel cost and cache-consistency simulation.
//! - [`bench`]: configs, sweeps, oracles, reports.

pub mod bench;
pub mod blockpipe;
pub mod bpsim;
pub mod decode;
pub mod error;
pub mod model;
pub mod types;

pub use error::{LopaError, Result};
pub use types::{
    Branch, BranchKind, BlockConfig, ConfMetric, ConfidenceMap, DecodeConfig, DecodeMetrics,
    Distribution, PositionSet, Prediction, SequenceState, TokenId,
};
