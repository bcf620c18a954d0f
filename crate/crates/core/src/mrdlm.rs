//! Multi-regression DLM: a multivariate DLM for a few observed aggregates
//! (the factors) and one univariate DLM per base series that regresses on the
//! contemporaneous factor values.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dlm::{Block, Component, Dlm, DlmSpec, MultiDlm, RegressorMoments, StepForecast};
use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;
use crate::hierarchy::Hierarchy;

/// Model structure shared by every fit.
#[derive(Debug, Clone, PartialEq)]
pub struct MrdlmConfig {
    /// Structure of each factor; one copy per factor.
    pub factor_spec: DlmSpec,
    /// Structural part of each base model; a regression block on the assigned
    /// factors is appended.
    pub base_spec: DlmSpec,
    pub regression_discount: f64,
    /// Per-base factor subsets (indices into the factor list); `None` means all.
    pub subsets: Option<Vec<Vec<usize>>>,
    pub max_factors: usize,
}

/// Default factors: the level directly below the root when it consists of
/// aggregates, otherwise the top series.
pub fn default_factors(h: &Hierarchy) -> Vec<usize> {
    let order = h.level_order();
    if h.n_a() == 0 {
        return Vec::new();
    }
    if let Some(next) = order.get(1) {
        let rows = h.rows_in_level(next);
        if !rows.is_empty() && rows.iter().all(|&r| !h.is_base(r)) {
            return rows;
        }
    }
    h.rows_in_level(&order[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mrdlm {
    pub(crate) factor_rows: Vec<usize>,
    pub(crate) factor: Option<MultiDlm>,
    pub(crate) base: Vec<Dlm>,
    pub(crate) subsets: Vec<Vec<usize>>,
    pub(crate) steps: usize,
}

fn pick(x: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

impl Mrdlm {
    /// Priors from `window` (full hierarchy vectors, series order of `h`).
    pub fn init(h: &Hierarchy, factor_rows: Vec<usize>, cfg: &MrdlmConfig, window: &[Vec<f64>]) -> Result<Self> {
        let (n, n_a, n_b) = (h.n(), h.n_a(), h.n_b());
        let n_x = factor_rows.len();
        if n_x > cfg.max_factors {
            return Err(Error::Config(format!(
                "{n_x} factors exceed the configured maximum of {}",
                cfg.max_factors
            )));
        }
        if let Some(&bad) = factor_rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("factor row", n, bad));
        }
        if window.is_empty() {
            return Err(Error::Data("initialisation window has no rows".into()));
        }
        if let Some(y) = window.iter().find(|y| y.len() != n) {
            return Err(Error::dim("initialisation row", n, y.len()));
        }
        let subsets = match &cfg.subsets {
            Some(s) => {
                if s.len() != n_b {
                    return Err(Error::dim("factor subsets", n_b, s.len()));
                }
                if s.iter().flatten().any(|&j| j >= n_x) {
                    return Err(Error::Config("factor subset refers to a missing factor".into()));
                }
                s.clone()
            }
            None => vec![(0..n_x).collect(); n_b],
        };
        let xs: Vec<Vec<f64>> = window.iter().map(|y| pick(y, &factor_rows)).collect();
        let factor = if n_x > 0 {
            let complete: Vec<DVector<f64>> = xs
                .iter()
                .filter(|x| x.iter().all(|v| v.is_finite()))
                .map(|x| DVector::from_column_slice(x))
                .collect();
            if complete.is_empty() {
                return Err(Error::Data("no complete factor observation in the window".into()));
            }
            Some(MultiDlm::from_window(cfg.factor_spec.clone(), &complete)?)
        } else {
            None
        };
        let base = (0..n_b)
            .into_par_iter()
            .map(|i| {
                let spec = base_spec(&cfg.base_spec, subsets[i].len(), cfg.regression_discount)?;
                let y: Vec<f64> = window.iter().map(|row| row[n_a + i]).collect();
                let regs: Vec<Vec<f64>> = xs.iter().map(|x| pick(x, &subsets[i])).collect();
                Dlm::from_window(spec, &y, &regs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            factor_rows,
            factor,
            base,
            subsets,
            steps: 0,
        })
    }

    pub fn n_x(&self) -> usize {
        self.factor_rows.len()
    }

    pub fn n_b(&self) -> usize {
        self.base.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn factor_rows(&self) -> &[usize] {
        &self.factor_rows
    }

    pub fn base_models(&self) -> &[Dlm] {
        &self.base
    }

    pub fn factor_model(&self) -> Option<&MultiDlm> {
        self.factor.as_ref()
    }

    /// Factor update, then every base update given the observed factors. NaN
    /// base values skip their measurement update.
    pub fn update_step(&mut self, x: &[f64], b: &[f64]) -> Result<()> {
        if x.len() != self.n_x() {
            return Err(Error::dim("factor observations", self.n_x(), x.len()));
        }
        if b.len() != self.n_b() {
            return Err(Error::dim("base observations", self.n_b(), b.len()));
        }
        if let Some(f) = self.factor.as_mut() {
            f.step(&DVector::from_column_slice(x))?;
        }
        let subsets = &self.subsets;
        self.base
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(i, m)| -> Result<()> {
                let y = Some(b[i]).filter(|v| v.is_finite());
                m.step(y, &pick(x, &subsets[i]))?;
                Ok(())
            })?;
        self.steps += 1;
        Ok(())
    }

    /// Update from a full hierarchy vector.
    pub fn update_full(&mut self, y: &[f64]) -> Result<()> {
        let n_a = y.len().saturating_sub(self.n_b());
        let x = pick(y, &self.factor_rows);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("factor observation missing at step {}", self.steps + 1)));
        }
        self.update_step(&x, &y[n_a..])
    }

    /// Factor forecast means and covariances for horizons `1..=h`.
    pub fn factor_forecast(&self, h: usize) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        match &self.factor {
            Some(f) => f.forecast(h),
            None => vec![(DVector::zeros(0), DMatrix::zeros(0, 0)); h],
        }
    }

    /// Per-series forecasts with the factor forecasts as random regressors.
    fn base_forecasts(&self, fx: &[(DVector<f64>, DMatrix<f64>)]) -> Result<Vec<Vec<StepForecast>>> {
        let h = fx.len();
        self.base
            .par_iter()
            .zip(self.subsets.par_iter())
            .map(|(m, sub)| {
                if sub.is_empty() {
                    return m.forecast(h, None);
                }
                let regs: Vec<RegressorMoments> = fx
                    .iter()
                    .map(|(mean, cov)| RegressorMoments {
                        mean: DVector::from_iterator(sub.len(), sub.iter().map(|&j| mean[j])),
                        cov: cov.select_rows(sub).select_columns(sub),
                    })
                    .collect();
                m.forecast(h, Some(&regs))
            })
            .collect()
    }

    /// Joint base prior for horizons `1..=h` in factor form: loadings are the
    /// regression coefficient means, the factor covariance is the factor
    /// predictive covariance and the specific variances exclude the common
    /// term.
    pub fn assemble_prior(&self, h: usize) -> Result<Vec<GaussianFactorMoments>> {
        let fx = self.factor_forecast(h);
        let per_series = self.base_forecasts(&fx)?;
        let (n_b, n_x) = (self.n_b(), self.n_x());
        (0..h)
            .map(|j| {
                let mut mean = DVector::zeros(n_b);
                let mut loadings = DMatrix::zeros(n_b, n_x);
                let mut specific = DVector::zeros(n_b);
                for (i, fc) in per_series.iter().enumerate() {
                    let s = &fc[j];
                    mean[i] = s.f;
                    specific[i] = s.specific;
                    for (c, &col) in self.subsets[i].iter().enumerate() {
                        loadings[(i, col)] = s.beta[c];
                    }
                }
                GaussianFactorMoments::new(mean, loadings, fx[j].1.clone(), specific)
            })
            .collect()
    }
}

/// `base` with a regression block of width `k` appended (none when `k = 0`).
pub fn base_spec(base: &DlmSpec, k: usize, discount: f64) -> Result<DlmSpec> {
    let mut spec = base.clone();
    if k > 0 {
        spec.blocks.push(Block {
            component: Component::Regression { k },
            discount,
        });
    }
    spec.validate()?;
    Ok(spec)
}
