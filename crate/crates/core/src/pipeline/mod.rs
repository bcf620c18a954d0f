//! Per-step orchestration of the prior model, disaggregation and combination,
//! the two-step sub-hierarchy scheme, and rolling-origin backtests.

mod backtest;
pub(crate) mod step;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use backtest::{backtest, BacktestOutcome, BacktestPlan, ExoStream, ForecastRecord};
pub use step::{Mode, Reconciler, StepForecasts, WeightRecord};

use crate::combination::CombinationConfig;
use crate::dlm::{Block, Component, DlmSpec, ObsVariance};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, Side};
use crate::mrdlm::MrdlmConfig;

/// Discount factors of the prior model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discounts {
    pub factor_level: f64,
    pub factor_seasonal: f64,
    pub base_level: f64,
    pub base_seasonal: f64,
    pub base_regression: f64,
    pub variance: f64,
}

/// Named discount profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Fast,
    Medium,
    Slow,
    M5,
}

impl Preset {
    pub fn discounts(self) -> Discounts {
        let (fl, fs, bl, bs, br, v) = match self {
            Preset::Fast => (0.9, 0.95, 0.95, 0.97, 0.97, 0.99),
            Preset::Medium => (0.95, 0.97, 0.97, 0.99, 0.99, 0.99),
            Preset::Slow => (0.97, 0.99, 0.99, 0.995, 0.995, 0.99),
            Preset::M5 => (0.99, 0.995, 0.995, 0.997, 0.997, 0.9997),
        };
        Discounts {
            factor_level: fl,
            factor_seasonal: fs,
            base_level: bl,
            base_seasonal: bs,
            base_regression: br,
            variance: v,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fast" => Ok(Preset::Fast),
            "medium" => Ok(Preset::Medium),
            "slow" => Ok(Preset::Slow),
            "m5" => Ok(Preset::M5),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Sub-hierarchy split for two-step reconciliation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoStepConfig {
    /// `None` picks a middle level.
    pub boundary_level: Option<String>,
    /// Side overrides by level label.
    pub assignment: BTreeMap<String, Side>,
    pub upper: CombinationConfig,
    pub lower: CombinationConfig,
    /// Extra passes of the lower step with the assembled boundary moments.
    pub extra_passes: usize,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        Self {
            boundary_level: None,
            assignment: BTreeMap::new(),
            upper: CombinationConfig::default(),
            lower: CombinationConfig::default(),
            extra_passes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconcilerConfig {
    pub discounts: Discounts,
    /// Factors carry a slope as well as a level.
    pub factor_trend: bool,
    pub base_trend: bool,
    pub seasonal_period: Option<usize>,
    pub seasonal_harmonics: Option<usize>,
    /// Factor series ids; `None` uses the default factor level.
    pub factors: Option<Vec<String>>,
    pub max_factors: usize,
    /// Rows used to set the initial priors.
    pub init_window: usize,
    pub horizons: usize,
    /// Calibration weight applied to exogenous forecasts.
    pub rho: f64,
    /// Levels whose forecasts become regressors, in column order; `None`
    /// uses every level seen in the first batch of forecasts.
    pub exo_levels: Option<Vec<String>>,
    pub combination: CombinationConfig,
    pub two_step: TwoStepConfig,
}

impl Default for ReconcilerConfig {
    fn default() -> Self {
        Self::preset(Preset::Medium, 0.99)
    }
}

impl ReconcilerConfig {
    /// A discount profile with the given weight discount.
    pub fn preset(preset: Preset, weight_discount: f64) -> Self {
        let comb = CombinationConfig {
            discount: weight_discount,
            ..CombinationConfig::default()
        };
        let mut two_step = TwoStepConfig {
            upper: comb.clone(),
            lower: comb.clone(),
            ..TwoStepConfig::default()
        };
        if preset == Preset::M5 {
            two_step.lower = CombinationConfig {
                discount: 0.99,
                prior_divisor: 4.0,
                deviation_divisor: 16.0,
                nu: None,
                pooled: true,
            };
        }
        Self {
            discounts: preset.discounts(),
            factor_trend: true,
            base_trend: false,
            seasonal_period: None,
            seasonal_harmonics: None,
            factors: None,
            max_factors: 10,
            init_window: 24,
            horizons: 1,
            rho: 1.0,
            exo_levels: None,
            combination: comb,
            two_step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.discounts;
        for (name, v) in [
            ("factor_level", d.factor_level),
            ("factor_seasonal", d.factor_seasonal),
            ("base_level", d.base_level),
            ("base_seasonal", d.base_seasonal),
            ("base_regression", d.base_regression),
            ("variance", d.variance),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("discount `{name}` = {v} outside (0, 1]")));
            }
        }
        if self.horizons == 0 {
            return Err(Error::Config("horizons must be at least 1".into()));
        }
        if self.init_window == 0 {
            return Err(Error::Config("init_window must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        self.combination.validate()?;
        self.two_step.upper.validate()?;
        self.two_step.lower.validate()?;
        self.mrdlm_config(0)?;
        Ok(())
    }

    fn structural(&self, level_disc: f64, seas_disc: f64, trend: bool) -> Vec<Block> {
        let mut blocks = vec![Block {
            component: if trend { Component::Trend } else { Component::Level },
            discount: level_disc,
        }];
        if let Some(period) = self.seasonal_period {
            blocks.push(Block {
                component: Component::Seasonal {
                    period,
                    harmonics: self.seasonal_harmonics,
                },
                discount: seas_disc,
            });
        }
        blocks
    }

    /// Prior-model structure for `n_x` factors.
    pub fn mrdlm_config(&self, _n_x: usize) -> Result<MrdlmConfig> {
        let d = &self.discounts;
        let factor_spec = DlmSpec::new(
            self.structural(d.factor_level, d.factor_seasonal, self.factor_trend),
            d.variance,
            ObsVariance::Learned,
        )?;
        let base_spec = DlmSpec::new(
            self.structural(d.base_level, d.base_seasonal, self.base_trend),
            d.variance,
            ObsVariance::Learned,
        )?;
        Ok(MrdlmConfig {
            factor_spec,
            base_spec,
            regression_discount: d.base_regression,
            subsets: None,
            max_factors: self.max_factors,
        })
    }

    /// Factor rows from the configured ids or the default level.
    pub fn factor_rows(&self, h: &Hierarchy) -> Result<Vec<usize>> {
        match &self.factors {
            None => Ok(crate::mrdlm::default_factors(h)),
            Some(ids) => ids
                .iter()
                .map(|id| h.index_of(id).ok_or_else(|| Error::UnknownSeries(id.clone())))
                .collect(),
        }
    }

    /// The configured boundary, or the first level from the middle down that
    /// splits the hierarchy.
    pub fn boundary_level(&self, h: &Hierarchy) -> Result<String> {
        if let Some(b) = &self.two_step.boundary_level {
            return Ok(b.clone());
        }
        let order = h.level_order();
        order[order.len() / 2..]
            .iter()
            .find(|l| h.partition(l).is_ok())
            .cloned()
            .ok_or_else(|| Error::Config("no level splits the hierarchy".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_json() {
        let c = ReconcilerConfig::preset(Preset::Fast, 0.97);
        assert_eq!(c.discounts.factor_level, 0.9);
        assert_eq!(c.combination.discount, 0.97);
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: ReconcilerConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let m5 = ReconcilerConfig::preset(Preset::M5, 0.99);
        assert_eq!(m5.discounts.variance, 0.9997);
        assert!(m5.two_step.lower.pooled);
        assert!(serde_json::from_str::<ReconcilerConfig>(r#"{"horizonz": 3}"#).is_err());
        let mut bad = c.clone();
        bad.discounts.base_level = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_boundary_is_a_middle_level() {
        let h = crate::hierarchy::fixtures::fig1();
        assert_eq!(ReconcilerConfig::default().boundary_level(&h).unwrap(), "L1");
    }
}
