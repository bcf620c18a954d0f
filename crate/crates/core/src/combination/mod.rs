//! Dynamic combination regressions of base outcomes on disaggregated
//! forecasts.
//!
//! The regression is written for the full hierarchy, `S b = S F' θ + S ε`,
//! so weights are learned against every aggregate. Because `S` has full
//! column rank and `S b` is coherent, the stacked update equals the base-level
//! update with covariance `F'RF + E + Q̄`; that form is what is computed.

mod flat;
mod forecast;
mod hier;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use flat::FlatCombination;
pub use forecast::{CovBlock, ExtraCov, ReconciledForecast};
pub use hier::HierCombination;

use crate::disagg::RegressorPanel;
use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;

/// Prior `[0, (1/(divisor·k))²]` for each of `k` weights.
pub fn init_weight_prior(k: usize, divisor: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    if k == 0 {
        return Err(Error::Config("weight prior needs at least one regressor".into()));
    }
    if !(divisor > 0.0) {
        return Err(Error::Config(format!("weight prior divisor {divisor} must be positive")));
    }
    let sd = 1.0 / (divisor * k as f64);
    Ok((DVector::zeros(k), DVector::from_element(k, sd * sd)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinationConfig {
    /// Weight discount `δ_w`.
    pub discount: f64,
    /// Weight prior standard deviation is `1/(prior_divisor · k)`.
    pub prior_divisor: f64,
    /// Pooled model: per-series deviations have standard deviation
    /// `1/(deviation_divisor · k)`.
    pub deviation_divisor: f64,
    /// Degrees of freedom behind the `ν/(ν−2)` inflation; `None` for known
    /// variances.
    pub nu: Option<f64>,
    pub pooled: bool,
}

impl Default for CombinationConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            prior_divisor: 2.0,
            deviation_divisor: 8.0,
            nu: None,
            pooled: false,
        }
    }
}

impl CombinationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("weight discount {} outside (0, 1]", self.discount)));
        }
        if let Some(nu) = self.nu {
            if !(nu > 2.0) {
                return Err(Error::Config(format!("degrees of freedom {nu} must exceed 2")));
            }
        }
        Ok(())
    }
}

/// `ν/(ν−2)`, or 1 for known variances.
pub(crate) fn inflation(nu: Option<f64>) -> Result<f64> {
    match nu {
        None => Ok(1.0),
        Some(v) if v > 2.0 => Ok(v / (v - 2.0)),
        Some(v) => Err(Error::Numerical(format!("degrees of freedom {v} must exceed 2"))),
    }
}

/// Prior mean for series without any regressor, zero elsewhere.
pub(crate) fn offsets(panel: &RegressorPanel, prior: &GaussianFactorMoments) -> DVector<f64> {
    DVector::from_fn(panel.n_b(), |i, _| if panel.k_i(i) == 0 { prior.mean()[i] } else { 0.0 })
}

pub(crate) fn observed(b: &[f64]) -> Vec<usize> {
    (0..b.len()).filter(|&i| b[i].is_finite()).collect()
}

pub(crate) fn check_inputs(panel: &RegressorPanel, prior: &GaussianFactorMoments, k: usize, n_b: usize) -> Result<()> {
    if panel.k() != k {
        return Err(Error::dim("regressor columns", k, panel.k()));
    }
    if panel.n_b() != n_b {
        return Err(Error::dim("regressor rows", n_b, panel.n_b()));
    }
    if prior.n_b() != n_b {
        return Err(Error::dim("prior base series", n_b, prior.n_b()));
    }
    Ok(())
}

/// Per-series weight summaries: `n_b × k` means and standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSummary {
    pub mean: DMatrix<f64>,
    pub sd: DMatrix<f64>,
}

/// A fitted combination regression of either form.
#[derive(Debug, Clone, PartialEq)]
pub enum Combiner {
    Flat(FlatCombination),
    Hier(HierCombination),
}

impl Combiner {
    pub fn new(n_b: usize, k: usize, cfg: &CombinationConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.pooled {
            Ok(Combiner::Hier(HierCombination::new(n_b, k, cfg)?))
        } else {
            Ok(Combiner::Flat(FlatCombination::new(n_b, k, cfg)?))
        }
    }

    pub fn update(&mut self, panel: &RegressorPanel, prior: &GaussianFactorMoments, b: &[f64]) -> Result<()> {
        match self {
            Combiner::Flat(c) => c.update(panel, prior, b),
            Combiner::Hier(c) => c.update(panel, prior, b),
        }
    }

    pub fn forecast(&self, panel: &RegressorPanel, prior: &GaussianFactorMoments, horizon: usize) -> Result<ReconciledForecast> {
        match self {
            Combiner::Flat(c) => c.forecast(panel, prior, horizon),
            Combiner::Hier(c) => c.forecast(panel, prior, horizon),
        }
    }

    pub fn weights(&self) -> WeightSummary {
        match self {
            Combiner::Flat(c) => c.weights(),
            Combiner::Hier(c) => c.weights(),
        }
    }

    pub fn n_b(&self) -> usize {
        match self {
            Combiner::Flat(c) => c.n_b(),
            Combiner::Hier(c) => c.n_b(),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Combiner::Flat(c) => c.k(),
            Combiner::Hier(c) => c.k(),
        }
    }
}
