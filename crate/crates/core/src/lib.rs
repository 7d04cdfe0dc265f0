//! Latent-state transformer world model for time series, trained by state
//! discovery, with the Toy1D benchmark and the evaluation and
//! impact-analysis pipeline.

// `!(x >= 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod error;
pub mod eval;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod toy1d;

pub use error::{Error, Result};
