//! Sigmoid cross-entropy losses for long-tailed classification.
//!
//! The crate covers the whole loss family that differs only in how the
//! per-logit weights `w_j` are chosen:
//!
//!  - plain sigmoid cross-entropy (all weights one) and a softmax baseline,
//!  - the equalization loss, which drops discouraging terms for tail
//!    categories on foreground rows,
//!  - the background equalization loss, which additionally down-weights
//!    low-confidence tail logits on background rows with a log base `b`,
//!  - DropLoss, which keeps background tail terms with a Bernoulli draw whose
//!    probability is the tail share of the current batch's foreground,
//!  - a fixed-keep-probability variant used as a tradeoff baseline.
//!
//! Around the losses sit a synthetic long-tailed proposal generator, a small
//! classifier trained with momentum SGD, recall metrics binned by category
//! frequency, and the diagnostics used to study where discouraging gradients
//! come from and how the rare/frequent tradeoff moves.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command line live in the `droploss` crate.
#![no_std]
// `!(x > 0.0)` is the NaN-rejecting form used by every validator.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;
mod matrix;

pub mod categories;
pub mod diagnostics;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use categories::{Bin, CategoryTable, CountUnit, LambdaMode};
pub use error::{Error, Result};
pub use losses::{Label, LogitsBatch, LossRule, MuPair, WeightMatrix};
pub use matrix::Matrix;
