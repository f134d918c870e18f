//! GradTail: per-example loss weighting from the cosine between each
//! example's gradient and a running mean gradient.
//!
//! The crate bundles a small dense-network engine with exact per-example
//! gradients ([`nn`]), the weighting state machine ([`gradtail`]), baseline
//! weighters ([`baselines`]), synthetic long-tail data ([`data`]), a
//! deterministic trainer ([`train`]), dense patch sampling ([`patches`]),
//! and analysis/reporting ([`analysis`], [`report`], [`figures`]).

// Negated float comparisons such as `!(x > 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod figures;
pub mod gradtail;
pub mod nn;
pub mod patches;
pub mod record;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
