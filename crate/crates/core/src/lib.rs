//! Differentially private Bayesian linear regression over distributed,
//! noise-perturbed summary statistics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod dist;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod privacy;
pub mod samplers;

pub use error::{Error, Result};
