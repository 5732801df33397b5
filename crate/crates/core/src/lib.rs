//! Ramp-merging simulator with a probabilistic control-barrier-function
//! safety layer and a constrained trust-region policy optimizer.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod numerics;
pub mod optimizer;
pub mod plot;
pub mod policy;
pub mod rollout;
pub mod safety;
pub mod train;

pub use error::{Error, Result};
