//! Dataset distillation for multivariate time-series forecasting.
//!
//! A handful of learnable synthetic windows is optimized so that students
//! trained on them for a few gradient steps land near checkpoints of
//! teachers trained on the full data, while their forecasts agree with the
//! teachers in both the time and frequency domains and the synthetic
//! windows stay mutually diverse.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
mod codec;
pub mod config;
pub mod data;
pub mod distill;
pub mod dual;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metagrad;
pub mod models;
pub mod rng;
pub mod spectral;
pub mod synthetic;

pub use error::{Error, Result};
