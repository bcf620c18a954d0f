use nalgebra::{DMatrix, DVector};

use super::spec::Design;
use super::svd::{innovation_root, predict_with_root, SvdState};
use crate::error::{Error, Result};

/// Mean and covariance of the regression inputs at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// One-horizon forecast of a univariate DLM with random regressors.
///
/// `q = specific + common`, where `common = β' H β` is the part driven by the
/// regressors' own uncertainty and `specific = h'Rh + tr(R_β H) + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepForecast {
    pub f: f64,
    pub specific: f64,
    pub common: f64,
    /// Regression coefficient means at this horizon.
    pub beta: DVector<f64>,
}

impl StepForecast {
    pub fn q(&self) -> f64 {
        self.specific + self.common
    }
}

/// `h`-step forecasts. The discount innovation `W` is formed once from the
/// current posterior and held fixed over the horizon.
pub fn forecast_h(
    state: &SvdState,
    design: &Design,
    obs_var: f64,
    h: usize,
    regressors: Option<&[RegressorMoments]>,
) -> Result<Vec<StepForecast>> {
    let reg = design.regression.first().map(|(r, _)| r.clone());
    let k = reg.as_ref().map_or(0, |r| r.len());
    match (k, regressors) {
        (0, _) => {}
        (_, None) => return Err(Error::Data("forecast needs future regressor moments".into())),
        (_, Some(rs)) => {
            if rs.len() < h {
                return Err(Error::dim("regressor horizons", h, rs.len()));
            }
            if let Some(bad) = rs.iter().find(|m| m.mean.len() != k || m.cov.nrows() != k) {
                return Err(Error::dim("regressor moments", k, bad.mean.len()));
            }
        }
    }
    let nw = innovation_root(state, &design.g, &design.blocks);
    let mut cur = state.clone();
    let mut out = Vec::with_capacity(h);
    for j in 0..h {
        cur = predict_with_root(&cur, &design.g, &nw);
        let (mean_x, hmat) = match (&reg, regressors) {
            (Some(_), Some(rs)) => (rs[j].mean.as_slice().to_vec(), Some(&rs[j].cov)),
            _ => (Vec::new(), None),
        };
        let fvec = design.f_vec(&mean_x)?;
        let f = fvec.dot(&cur.m);
        let mut specific = cur.quad(&fvec) + obs_var;
        let (mut common, mut beta) = (0.0, DVector::zeros(0));
        if let (Some(r), Some(hm)) = (&reg, hmat) {
            beta = cur.m.rows(r.start, r.len()).into_owned();
            common = beta.dot(&(hm * &beta));
            let root = cur.root();
            let rb = root.columns(r.start, r.len());
            // tr(R_β H) = tr(N_β H N_β')
            specific += (rb * hm).component_mul(&rb).sum();
        }
        out.push(StepForecast {
            f,
            specific,
            common: common.max(0.0),
            beta,
        });
    }
    Ok(out)
}
