//! Revision of the joint base distribution given a forecast of one series,
//! and the per-base regressor panels built from those revisions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;
use crate::hierarchy::Hierarchy;

/// Smallest aggregate prior variance accepted by [`disaggregate`].
pub const DEGENERATE_TOL: f64 = 1e-14;

/// An exogenous forecast of one series at one horizon. A missing variance
/// marks a point forecast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExoForecast {
    pub series: usize,
    pub horizon: usize,
    pub mean: f64,
    pub var: Option<f64>,
}

/// Shrinks an exogenous forecast toward the prior: `f* = f + ρ(f̂ − f)`,
/// `q* = (1 − ρ²) q + ρ² q̂`.
pub fn calibrate(prior_f: f64, prior_q: f64, exo_mean: f64, exo_var: f64, rho: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("calibration weight {rho} outside [0, 1]")));
    }
    let f = prior_f + rho * (exo_mean - prior_f);
    let q = (1.0 - rho * rho) * prior_q + rho * rho * exo_var;
    Ok((f, q))
}

/// Base moments revised by a forecast of `c' b`: the prior plus the rank-one
/// correction `−scale · q q'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Revision {
    pub mean: DVector<f64>,
    /// `Q̄ c`.
    pub q: DVector<f64>,
    /// `(q̄ − q̂) / q̄²`; negative when the forecast is less precise than the prior.
    pub scale: f64,
}

impl Revision {
    /// Revised marginal variances in `O(n_b n_x²)`.
    pub fn variances(&self, prior: &GaussianFactorMoments) -> DVector<f64> {
        let mut v = prior.variances();
        for i in 0..v.len() {
            v[i] = (v[i] - self.scale * self.q[i] * self.q[i]).max(0.0);
        }
        v
    }

    /// Dense revised covariance, refused above `cap` series.
    pub fn dense_cov(&self, prior: &GaussianFactorMoments, cap: usize) -> Result<DMatrix<f64>> {
        let mut c = prior.dense_cov(cap)?;
        c -= &self.q * self.q.transpose() * self.scale;
        Ok(c)
    }
}

/// Conditions the base prior on a forecast `f̂ ∼ [f̂, q̂]` of the series whose
/// base components are `cols`. `q̂ = None` keeps the prior aggregate variance.
pub fn disaggregate(prior: &GaussianFactorMoments, cols: &[usize], exo_mean: f64, exo_var: Option<f64>) -> Result<Revision> {
    if let Some(&bad) = cols.iter().find(|&&j| j >= prior.n_b()) {
        return Err(Error::dim("disaggregation row", prior.n_b(), bad));
    }
    let q = prior.cov_indicator(cols);
    let qbar = prior.quad_indicator(cols);
    let (f, scale) = revision_terms(prior, cols, qbar, exo_mean, exo_var)?;
    let mean = prior.mean() + &q * ((exo_mean - f) / qbar);
    Ok(Revision { mean, q, scale })
}

fn revision_terms(
    prior: &GaussianFactorMoments,
    cols: &[usize],
    qbar: f64,
    exo_mean: f64,
    exo_var: Option<f64>,
) -> Result<(f64, f64)> {
    if !(qbar > DEGENERATE_TOL) {
        return Err(Error::Numerical(format!(
            "aggregate prior variance {qbar:e} is degenerate; cannot disaggregate"
        )));
    }
    if !exo_mean.is_finite() {
        return Err(Error::Data("exogenous forecast mean is not finite".into()));
    }
    let qhat = exo_var.unwrap_or(qbar);
    if !(qhat >= 0.0) {
        return Err(Error::Data(format!("exogenous forecast variance {qhat} is negative")));
    }
    if qhat > qbar * (1.0 + 1e-12) {
        log::debug!("exogenous forecast variance {qhat:e} exceeds prior {qbar:e}; revision inflates variance");
    }
    let f: f64 = cols.iter().map(|&j| prior.mean()[j]).sum();
    Ok((f, (qbar - qhat) / (qbar * qbar)))
}

/// Revised mean and variance of each series in `cols` only, in `O(|cols| n_x)`.
pub fn disaggregate_within(
    prior: &GaussianFactorMoments,
    cols: &[usize],
    exo_mean: f64,
    exo_var: Option<f64>,
) -> Result<Vec<(f64, f64)>> {
    let delta = prior.loadings();
    let mut ds = DVector::zeros(prior.n_x());
    for &j in cols {
        ds += delta.row(j).transpose();
    }
    let z = prior.factor_cov() * &ds;
    let spec = prior.specific();
    let qbar = (ds.dot(&z) + cols.iter().map(|&j| spec[j]).sum::<f64>()).max(0.0);
    let (f, scale) = revision_terms(prior, cols, qbar, exo_mean, exo_var)?;
    let shift = (exo_mean - f) / qbar;
    Ok(cols
        .iter()
        .map(|&j| {
            let qj = delta.row(j).dot(&z.transpose()) + spec[j];
            let vj = prior.var(j);
            (prior.mean()[j] + qj * shift, (vj - scale * qj * qj).max(0.0))
        })
        .collect())
}

/// Disaggregated forecasts for every base series: column `c` holds the
/// revision implied by the forecast of the series' ancestor (or itself) at
/// level `sources[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorPanel {
    pub sources: Vec<String>,
    /// `n_b × k` means; zero where absent.
    pub h: DMatrix<f64>,
    /// `n_b × k` variances; zero where absent.
    pub var: DMatrix<f64>,
    pub present: Vec<Vec<bool>>,
}

impl RegressorPanel {
    pub fn n_b(&self) -> usize {
        self.h.nrows()
    }

    pub fn k(&self) -> usize {
        self.h.ncols()
    }

    /// Number of present regressors for series `i`.
    pub fn k_i(&self, i: usize) -> usize {
        self.present[i].iter().filter(|p| **p).count()
    }

    /// Series with no regressor at all; combinations leave them at the prior.
    pub fn empty_series(&self) -> Vec<usize> {
        (0..self.n_b()).filter(|&i| self.k_i(i) == 0).collect()
    }

    /// Rows restricted to `rows`.
    pub fn select(&self, rows: &[usize]) -> RegressorPanel {
        RegressorPanel {
            sources: self.sources.clone(),
            h: self.h.select_rows(rows),
            var: self.var.select_rows(rows),
            present: rows.iter().map(|&i| self.present[i].clone()).collect(),
        }
    }

    /// Appends a column.
    pub fn push_source(&mut self, label: &str, values: &[Option<(f64, f64)>]) -> Result<()> {
        if values.len() != self.n_b() {
            return Err(Error::dim("regressor column", self.n_b(), values.len()));
        }
        let k = self.k();
        self.h = self.h.clone().insert_column(k, 0.0);
        self.var = self.var.clone().insert_column(k, 0.0);
        for (i, v) in values.iter().enumerate() {
            if let Some((m, q)) = v {
                self.h[(i, k)] = *m;
                self.var[(i, k)] = *q;
            }
            self.present[i].push(v.is_some());
        }
        self.sources.push(label.to_string());
        Ok(())
    }
}

/// Builds the panel from exogenous forecasts of one horizon. Each forecast
/// only feeds the base series it aggregates.
///
/// `sources` fixes the column order by level label; forecasts of series whose
/// level is not listed are ignored.
pub fn build_regressors(
    prior: &GaussianFactorMoments,
    exo: &[ExoForecast],
    h: &Hierarchy,
    sources: &[String],
    rho: f64,
) -> Result<RegressorPanel> {
    let n_b = h.n_b();
    if prior.n_b() != n_b {
        return Err(Error::dim("prior base series", n_b, prior.n_b()));
    }
    let k = sources.len();
    let mut panel = RegressorPanel {
        sources: sources.to_vec(),
        h: DMatrix::zeros(n_b, k),
        var: DMatrix::zeros(n_b, k),
        present: vec![vec![false; k]; n_b],
    };
    for e in exo {
        if e.series >= h.n() {
            return Err(Error::UnknownSeries(format!("series index {}", e.series)));
        }
        let Some(col) = sources.iter().position(|s| s == h.level(e.series)) else {
            continue;
        };
        let cols = h.summing().row(e.series);
        let (mean, var) = if rho < 1.0 {
            let f: f64 = cols.iter().map(|&j| prior.mean()[j]).sum();
            let q = prior.quad_indicator(cols);
            let (fs, qs) = calibrate(f, q, e.mean, e.var.unwrap_or(q), rho)?;
            (fs, Some(qs))
        } else {
            (e.mean, e.var)
        };
        let revised = disaggregate_within(prior, cols, mean, var)?;
        for (&j, (m, v)) in cols.iter().zip(revised) {
            if panel.present[j][col] {
                return Err(Error::Hierarchy(format!(
                    "base series `{}` has two forecast ancestors in level `{}`",
                    h.id(h.n_a() + j),
                    sources[col]
                )));
            }
            panel.h[(j, col)] = m;
            panel.var[(j, col)] = v;
            panel.present[j][col] = true;
        }
    }
    Ok(panel)
}
