//! Dynamic linear models with discount-specified innovations, square-root
//! filtering and variance learning.

mod forecast;
mod init;
mod spec;
mod svd;
mod variance;

use nalgebra::{DMatrix, DVector};

pub use forecast::{forecast_h, RegressorMoments, StepForecast};
pub use init::initial_state;
pub use spec::{build_design, Block, Component, Design, DlmSpec, ObsVariance};
pub use svd::{
    innovation_root, predict_with_root, svd_predict, svd_update, svd_update_scalar, SvdState, Update, Q_FLOOR,
};
pub use variance::{MatrixVarianceState, VarianceState};

use crate::error::{Error, Result};

/// One-step output of a measurement update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub f: f64,
    pub q: f64,
    pub e: f64,
}

/// Univariate DLM: spec, posterior and variance estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dlm {
    spec: DlmSpec,
    design: Design,
    pub state: SvdState,
    pub var: VarianceState,
}

impl Dlm {
    pub fn new(spec: DlmSpec, state: SvdState, var: VarianceState) -> Result<Self> {
        spec.validate()?;
        if state.dim() != spec.state_dim() {
            return Err(Error::dim("DLM state", spec.state_dim(), state.dim()));
        }
        let design = spec.design();
        Ok(Self {
            spec,
            design,
            state,
            var,
        })
    }

    /// Builds a model with priors estimated from `y_init`.
    pub fn from_window(spec: DlmSpec, y_init: &[f64], regressors: &[Vec<f64>]) -> Result<Self> {
        let (state, var) = initial_state(&spec, y_init, regressors);
        Self::new(spec, state, var)
    }

    pub fn spec(&self) -> &DlmSpec {
        &self.spec
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Observation variance used as the plug-in for the next step.
    pub fn obs_variance(&self) -> f64 {
        match self.spec.obs_variance {
            ObsVariance::Fixed(v) => v,
            ObsVariance::Learned => self.var.s(),
        }
    }

    /// Time update, then a measurement update when `y` is present. A missing
    /// observation leaves the prior in place.
    pub fn step(&mut self, y: Option<f64>, regressors: &[f64]) -> Result<Option<StepOutput>> {
        let prior = svd_predict(&self.state, &self.design.g, &self.design.blocks);
        let y = match y {
            Some(v) if v.is_finite() => v,
            _ => {
                self.state = prior;
                return Ok(None);
            }
        };
        let f = self.design.f_vec(regressors)?;
        let v = self.obs_variance();
        let (post, e, q) = svd_update_scalar(&prior, &f, y, v)?;
        if self.spec.obs_variance == ObsVariance::Learned {
            self.var = self.var.update(e, q, self.spec.variance_discount);
        }
        self.state = post;
        Ok(Some(StepOutput { f: y - e, q, e }))
    }

    pub fn forecast(&self, h: usize, regressors: Option<&[RegressorMoments]>) -> Result<Vec<StepForecast>> {
        forecast_h(&self.state, &self.design, self.obs_variance(), h, regressors)
    }
}

/// Multivariate DLM with one copy of the spec's components per series and a
/// full observation covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDlm {
    spec: DlmSpec,
    design: Design,
    n: usize,
    pub state: SvdState,
    pub var: MatrixVarianceState,
}

impl MultiDlm {
    pub fn new(spec: DlmSpec, n: usize, state: SvdState, var: MatrixVarianceState) -> Result<Self> {
        spec.validate()?;
        if spec.regression_width() > 0 {
            return Err(Error::Config("factor model cannot hold a regression block".into()));
        }
        let design = Design::replicated(&spec, n);
        if state.dim() != design.state_dim() {
            return Err(Error::dim("factor DLM state", design.state_dim(), state.dim()));
        }
        if var.d.nrows() != n {
            return Err(Error::dim("factor observation covariance", n, var.d.nrows()));
        }
        Ok(Self {
            spec,
            design,
            n,
            state,
            var,
        })
    }

    /// Priors from a window of observations; `x_init[t]` is the vector at `t`.
    pub fn from_window(spec: DlmSpec, x_init: &[DVector<f64>]) -> Result<Self> {
        let n = x_init.first().map_or(0, |x| x.len());
        let q1 = spec.state_dim();
        let mut m = DVector::zeros(q1 * n);
        let mut v = DVector::zeros(q1 * n);
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            let series: Vec<f64> = x_init.iter().map(|x| x[i]).collect();
            let (st, var) = initial_state(&spec, &series, &[]);
            m.rows_mut(i * q1, q1).copy_from(&st.m);
            v.rows_mut(i * q1, q1).copy_from(&st.s.map(|s| s * s));
            d[(i, i)] = var.d;
        }
        let state = SvdState::diagonal(m, &v);
        Self::new(spec, n, state, MatrixVarianceState { n: 1.0, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spec(&self) -> &DlmSpec {
        &self.spec
    }

    pub fn obs_cov(&self) -> DMatrix<f64> {
        match self.spec.obs_variance {
            ObsVariance::Fixed(v) => DMatrix::identity(self.n, self.n) * v,
            ObsVariance::Learned => self.var.s(),
        }
    }

    /// Time and measurement update; every factor must be observed.
    pub fn step(&mut self, x: &DVector<f64>) -> Result<Update> {
        if x.len() != self.n {
            return Err(Error::dim("factor observation", self.n, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("factor observations must be complete".into()));
        }
        let prior = svd_predict(&self.state, &self.design.g, &self.design.blocks);
        let v = self.obs_cov();
        let up = svd_update(&prior, &self.design.f, x, &v)?;
        if self.spec.obs_variance == ObsVariance::Learned {
            self.var = self.var.update(&up.e, &up.q, self.spec.variance_discount)?;
        }
        self.state = up.posterior.clone();
        Ok(up)
    }

    /// Per-horizon `(mean, covariance)` of the factors; `W` is held at its
    /// one-step value and the current `V` estimate is added at each horizon.
    pub fn forecast(&self, h: usize) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let nw = innovation_root(&self.state, &self.design.g, &self.design.blocks);
        let v = self.obs_cov();
        let mut cur = self.state.clone();
        let mut out = Vec::with_capacity(h);
        for _ in 0..h {
            cur = predict_with_root(&cur, &self.design.g, &nw);
            let mean = self.design.f.tr_mul(&cur.m);
            let root = cur.root() * &self.design.f;
            let mut cov = root.tr_mul(&root) + &v;
            crate::linalg::symmetrize(&mut cov);
            out.push((mean, cov));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_observation_only_inflates() {
        let spec = DlmSpec::local_level(0.5, ObsVariance::Fixed(1.0)).unwrap();
        let st = SvdState::diagonal(DVector::from_element(1, 2.0), &DVector::from_element(1, 1.0));
        let mut d = Dlm::new(spec, st, VarianceState { n: 1.0, d: 1.0 }).unwrap();
        assert!(d.step(None, &[]).unwrap().is_none());
        assert_eq!(d.state.m[0], 2.0);
        assert!((d.state.cov()[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_factor_matches_univariate() {
        let spec = DlmSpec::local_level(0.9, ObsVariance::Learned).unwrap();
        let ys = [1.0, 1.4, 0.8, 1.1, 1.3, 0.9, 1.2];
        let init: Vec<DVector<f64>> = ys[..3].iter().map(|&v| DVector::from_element(1, v)).collect();
        let mut multi = MultiDlm::from_window(spec.clone(), &init).unwrap();
        let mut uni = Dlm::from_window(spec, &ys[..3], &[]).unwrap();
        for &y in &ys {
            multi.step(&DVector::from_element(1, y)).unwrap();
            uni.step(Some(y), &[]).unwrap();
        }
        assert!((multi.state.m[0] - uni.state.m[0]).abs() < 1e-12);
        assert!((multi.var.s()[(0, 0)] - uni.var.s()).abs() < 1e-12);
        let fm = multi.forecast(3);
        let fu = uni.forecast(3, None).unwrap();
        for (a, b) in fm.iter().zip(&fu) {
            assert!((a.0[0] - b.f).abs() < 1e-12);
            assert!((a.1[(0, 0)] - b.q()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_data_variance_shrinks_like_one_over_t() {
        let spec = DlmSpec::local_level(1.0, ObsVariance::Learned).unwrap();
        let x = DVector::from_vec(vec![5.0, 5.0]);
        let st = SvdState::diagonal(DVector::from_vec(vec![5.0, 5.0]), &DVector::from_element(2, 1e-3));
        let var = MatrixVarianceState::new(1.0, DMatrix::identity(2, 2)).unwrap();
        let mut m = MultiDlm::new(spec, 2, st, var).unwrap();
        for t in 1..=50 {
            m.step(&x).unwrap();
            let s = m.var.s();
            assert!((s[(0, 0)] - 1.0 / (1.0 + t as f64)).abs() < 1e-9);
        }
    }
}
