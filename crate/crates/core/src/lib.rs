//! Hierarchical probabilistic forecasting with sparsity-aware heads and a
//! distributional consistency regularizer.
//!
//! Each node of a hierarchy gets its own bidirectional GRU encoder with a
//! Gaussian head (dense series) or Poisson head (sparse, count-like
//! series). A global refinement layer mixes the per-node parameters, and
//! training adds a penalty on the mismatch between every parent forecast
//! and the aggregate of its children.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod commands;
pub mod distributions;
pub mod error;
pub mod forecaster;
pub mod gru;
pub mod hierarchy;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod sparsity;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
