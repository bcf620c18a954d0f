use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::disagg::ExoForecast;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::methods::Method;
use crate::scoring::{report_relative, ScoreAccumulator, ScoreTable};

/// Exogenous forecasts keyed by origin: the index of the last observed row.
/// Forecasts for origin `t` are only handed out at step `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExoStream {
    by_origin: BTreeMap<usize, Vec<ExoForecast>>,
}

impl ExoStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, origin: usize, f: ExoForecast) {
        self.by_origin.entry(origin).or_default().push(f);
    }

    pub fn at(&self, origin: usize) -> &[ExoForecast] {
        self.by_origin.get(&origin).map_or(&[], |v| v.as_slice())
    }

    pub fn origins(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_origin.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.by_origin.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_origin.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestPlan {
    /// Rows observed before the first forecast origin.
    pub train_length: usize,
    /// Origins after the first whose scores are discarded while the
    /// combination regressions train.
    pub warmup: usize,
    pub horizons: usize,
    /// Forecasts are scored every `forecast_every` origins.
    pub forecast_every: usize,
    /// Horizons are reported in groups of this size (3 turns monthly
    /// horizons into quarters).
    pub horizon_group: usize,
    /// Explicit origins, overriding the cadence.
    pub origins: Option<Vec<usize>>,
    /// Keep every scored forecast in the outcome.
    pub keep_records: bool,
}

impl Default for BacktestPlan {
    fn default() -> Self {
        Self {
            train_length: 96,
            warmup: 52,
            horizons: 1,
            forecast_every: 1,
            horizon_group: 1,
            origins: None,
            keep_records: false,
        }
    }
}

impl BacktestPlan {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.train_length == 0 || self.train_length >= t {
            return Err(Error::Config(format!(
                "train_length {} must lie in [1, {t}) for {t} rows",
                self.train_length
            )));
        }
        if self.horizons == 0 || self.forecast_every == 0 || self.horizon_group == 0 {
            return Err(Error::Config("horizons, forecast_every and horizon_group must be positive".into()));
        }
        Ok(())
    }

    /// Forecast origins: `train_length − 1, …, t − 2` at the cadence.
    pub fn origin_list(&self, t: usize) -> Vec<usize> {
        let first = self.train_length - 1;
        match &self.origins {
            Some(o) => o.iter().copied().filter(|&o| o >= first && o + 1 < t).collect(),
            None => (first..t.saturating_sub(1)).step_by(self.forecast_every).collect(),
        }
    }
}

/// One scored forecast of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub method: String,
    pub origin: usize,
    pub series: usize,
    pub horizon: usize,
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone)]
pub struct BacktestOutcome {
    /// Score tables per metric; relative to the benchmark when one is given.
    pub tables: Vec<ScoreTable>,
    /// Forecast origins visited.
    pub iterations: usize,
    pub scored_origins: usize,
    pub records: Vec<ForecastRecord>,
}

/// Rolling-origin evaluation. Every method sees each row and the forecasts
/// issued at that row in time order.
pub fn backtest(
    h: &Hierarchy,
    data: &[Vec<f64>],
    exo: &ExoStream,
    plan: &BacktestPlan,
    methods: &mut [Box<dyn Method>],
    benchmark: Option<&str>,
) -> Result<BacktestOutcome> {
    let t_len = data.len();
    plan.validate(t_len)?;
    if methods.is_empty() {
        return Err(Error::Config("no methods to backtest".into()));
    }
    if let Some(last) = exo.origins().last() {
        if last >= t_len {
            return Err(Error::Data(format!("exogenous forecasts issued at origin {last}, beyond the {t_len} data rows")));
        }
    }
    for o in exo.origins() {
        if let Some(e) = exo.at(o).iter().find(|e| e.series >= h.n()) {
            return Err(Error::UnknownSeries(format!("series index {}", e.series)));
        }
    }
    if let Some(row) = data.iter().position(|y| y.len() != h.n()) {
        return Err(Error::Data(format!("data row {row} has {} values, expected {}", data[row].len(), h.n())));
    }
    let origins = plan.origin_list(t_len);
    let scored_from = plan.train_length - 1 + plan.warmup;
    let is_origin: Vec<bool> = {
        let mut v = vec![false; t_len];
        for &o in &origins {
            v[o] = true;
        }
        v
    };
    let mut acc = ScoreAccumulator::new(h.level_order().to_vec());
    let mut records = Vec::new();
    let mut scored = 0;
    for t in 0..t_len {
        let exo_t = exo.at(t);
        let score_now = is_origin[t] && t >= scored_from;
        if score_now {
            scored += 1;
        }
        for m in methods.iter_mut() {
            let fc = m.step(t, &data[t], exo_t)?;
            if !score_now {
                continue;
            }
            for j in 0..plan.horizons {
                let target = t + j + 1;
                if target >= t_len {
                    break;
                }
                let no_forecast = |series: &str| {
                    Error::Data(format!(
                        "{} has no horizon-{} forecast of `{series}` from origin {t}; check the exogenous forecasts",
                        m.name(),
                        j + 1
                    ))
                };
                let f = fc.get(j).ok_or_else(|| no_forecast("any series"))?;
                let group = j / plan.horizon_group + 1;
                for i in 0..h.n() {
                    let (mean, var) = (f.mean[i], f.var[i]);
                    if mean.is_nan() && data[target][i].is_finite() {
                        return Err(no_forecast(h.id(i)));
                    }
                    acc.add(m.name(), h.level(i), group, mean, Some(var), data[target][i])?;
                    if plan.keep_records {
                        records.push(ForecastRecord {
                            method: m.name().to_string(),
                            origin: t,
                            series: i,
                            horizon: j + 1,
                            mean,
                            var,
                        });
                    }
                }
            }
        }
    }
    let mut tables = acc.tables()?;
    if let Some(b) = benchmark {
        tables = tables.iter().filter(|t| !t.is_empty()).map(|t| report_relative(t, b)).collect::<Result<_>>()?;
    }
    Ok(BacktestOutcome {
        tables,
        iterations: origins.len(),
        scored_origins: scored,
        records,
    })
}
