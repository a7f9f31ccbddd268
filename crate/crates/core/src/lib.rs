//! Spectral-normalized residual networks with a random-feature Gaussian
//! process output layer, plus the metrics, toy datasets and scoring-rule
//! utilities used to evaluate them.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
