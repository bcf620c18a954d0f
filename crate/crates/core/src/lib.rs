//! Dynamic, scalable probabilistic forecast reconciliation.
//!
//! A factor-structured multi-regression DLM supplies a baseline forecast
//! distribution for the base series; exogenous forecasts of any series are
//! disaggregated through that distribution and combined with dynamic,
//! aggregation-aware regressions. Covariances stay in low-rank-plus-diagonal
//! form throughout so cost grows linearly in the number of base series.

pub mod baselines;
pub mod combination;
pub mod disagg;
pub mod dlm;
pub mod error;
pub mod factor;
pub mod hierarchy;
pub mod io;
pub mod linalg;
pub mod methods;
pub mod mrdlm;
pub mod pipeline;
pub mod scoring;
pub mod synthetic;

pub use error::{Error, Result};
