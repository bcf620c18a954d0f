use nalgebra::{DMatrix, DVector};

use super::{check_inputs, inflation, init_weight_prior, observed, offsets, CombinationConfig, CovBlock, ExtraCov, ReconciledForecast, WeightSummary};
use crate::disagg::RegressorPanel;
use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;
use crate::linalg::symmetrize;

/// Series weights pooled toward shared weights: `θ_i = θ_h + v_i`,
/// `v_i ∼ [0, V]`, with `θ_h` a random walk.
///
/// The predictive covariance is low rank plus diagonal, so a step costs
/// `O(n_b (n_x + k)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierCombination {
    pub(crate) m_h: DVector<f64>,
    pub(crate) c_h: DMatrix<f64>,
    /// Diagonal of `V`.
    pub(crate) v: DVector<f64>,
    pub(crate) discount: f64,
    pub(crate) nu: Option<f64>,
    /// Per-series posterior means (`n_b × k`).
    pub(crate) m_b: DMatrix<f64>,
    /// Per-series posterior covariance blocks.
    pub(crate) c_b: Vec<DMatrix<f64>>,
}

impl HierCombination {
    pub fn new(n_b: usize, k: usize, cfg: &CombinationConfig) -> Result<Self> {
        let (m0, v0) = init_weight_prior(k, cfg.prior_divisor)?;
        let (_, dev) = init_weight_prior(k, cfg.deviation_divisor)?;
        Self::with_prior(n_b, m0, DMatrix::from_diagonal(&v0), dev, cfg.discount, cfg.nu)
    }

    pub fn with_prior(
        n_b: usize,
        m_h: DVector<f64>,
        c_h: DMatrix<f64>,
        v: DVector<f64>,
        discount: f64,
        nu: Option<f64>,
    ) -> Result<Self> {
        let k = m_h.len();
        if c_h.shape() != (k, k) || v.len() != k {
            return Err(Error::dim("pooled weight prior", k, v.len()));
        }
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("pooled deviation variances must be nonnegative".into()));
        }
        let m_b = DMatrix::from_fn(n_b, k, |_, c| m_h[c]);
        let cb = &c_h + DMatrix::from_diagonal(&v);
        Ok(Self {
            m_h,
            c_h,
            v,
            discount,
            nu,
            m_b,
            c_b: vec![cb; n_b],
        })
    }

    pub fn n_b(&self) -> usize {
        self.m_b.nrows()
    }

    pub fn k(&self) -> usize {
        self.m_h.len()
    }

    pub fn shared_mean(&self) -> &DVector<f64> {
        &self.m_h
    }

    pub fn shared_cov(&self) -> &DMatrix<f64> {
        &self.c_h
    }

    pub fn series_means(&self) -> &DMatrix<f64> {
        &self.m_b
    }

    pub fn update(&mut self, panel: &RegressorPanel, prior: &GaussianFactorMoments, b: &[f64]) -> Result<()> {
        let (n_b, k) = (self.n_b(), self.k());
        check_inputs(panel, prior, k, n_b)?;
        if b.len() != n_b {
            return Err(Error::dim("combination observations", n_b, b.len()));
        }
        let a_h = self.m_h.clone();
        let r_h = &self.c_h / self.discount;
        let vmat = DMatrix::from_diagonal(&self.v);
        let rows = observed(b);
        if rows.is_empty() {
            self.c_h = r_h.clone();
            self.m_b = DMatrix::from_fn(n_b, k, |_, c| a_h[c]);
            self.c_b = vec![&r_h + &vmat; n_b];
            return Ok(());
        }
        let off = offsets(panel, prior);
        let eh = panel.h.select_rows(&rows);
        let sub = prior.select(&rows);
        let n_x = sub.n_x();
        let n_o = rows.len();

        // Q = [Δ | E_h] blockdiag(Σ_x, R_h) [Δ | E_h]' + D
        let mut loadings = DMatrix::zeros(n_o, n_x + k);
        loadings.columns_mut(0, n_x).copy_from(sub.loadings());
        loadings.columns_mut(n_x, k).copy_from(&eh);
        let mut sigma = DMatrix::zeros(n_x + k, n_x + k);
        sigma.view_mut((0, 0), (n_x, n_x)).copy_from(sub.factor_cov());
        sigma.view_mut((n_x, n_x), (k, k)).copy_from(&r_h);
        let mut d = sub.specific().clone();
        let mut e = DVector::zeros(n_o);
        for (p, &i) in rows.iter().enumerate() {
            let mut extra = 0.0;
            let mut f = off[i];
            for c in 0..k {
                let hv = panel.h[(i, c)];
                f += hv * a_h[c];
                extra += hv * hv * self.v[c] + panel.var[(i, c)] * (a_h[c] * a_h[c] + r_h[(c, c)] + self.v[c]);
            }
            d[p] += extra;
            e[p] = b[i] - f;
        }
        let q = GaussianFactorMoments::new(DVector::zeros(n_o), loadings, sigma, d)?;
        let solver = q.factorize()?;
        let u = solver.solve_vec(&e)?;
        let z = solver.solve(&eh)?;
        let qinv_diag = solver.inv_diag();

        let rhe = &r_h * eh.transpose();
        let m_h = &a_h + &rhe * &u;
        let mut c_h = &r_h - &rhe * &z * &r_h;
        symmetrize(&mut c_h);

        let mut m_b = DMatrix::from_fn(n_b, k, |_, c| a_h[c]);
        let mut c_b = vec![&r_h + &vmat; n_b];
        for (p, &i) in rows.iter().enumerate() {
            let vh = self.v.component_mul(&panel.h.row(i).transpose());
            let g = z.row(p).transpose();
            let mb = &m_h + &vh * u[p];
            m_b.row_mut(i).copy_from(&mb.transpose());
            let rg = &r_h * &g;
            let mut cb = &c_h + &vmat - (&rg * vh.transpose() + &vh * rg.transpose()) - &vh * vh.transpose() * qinv_diag[p];
            symmetrize(&mut cb);
            c_b[i] = cb;
        }
        self.m_h = m_h;
        self.c_h = c_h;
        self.m_b = m_b;
        self.c_b = c_b;
        Ok(())
    }

    pub fn forecast(&self, panel: &RegressorPanel, prior: &GaussianFactorMoments, horizon: usize) -> Result<ReconciledForecast> {
        let (n_b, k) = (self.n_b(), self.k());
        check_inputs(panel, prior, k, n_b)?;
        let kappa = inflation(self.nu)?;
        let w = &self.c_h * ((1.0 - self.discount) / self.discount * horizon.max(1) as f64);
        let r_h = &self.c_h + &w;
        let mut mean = offsets(panel, prior);
        let mut specific = prior.specific().clone();
        for i in 0..n_b {
            let h = panel.h.row(i).transpose();
            let mb = self.m_b.row(i).transpose();
            mean[i] += h.dot(&mb);
            let own = &self.c_b[i] - &self.c_h;
            let diag = h.dot(&(&own * &h)).max(0.0);
            let ci = &self.c_b[i] + &w;
            let (mut mhm, mut tr) = (0.0, 0.0);
            for c in 0..k {
                let hv = panel.var[(i, c)];
                mhm += hv * mb[c] * mb[c];
                tr += hv * ci[(c, c)];
            }
            specific[i] = (kappa * (specific[i] - mhm + tr + diag) + mhm).max(0.0);
        }
        let loadings = prior.loadings() * kappa.sqrt();
        let moments = GaussianFactorMoments::new(mean, loadings, prior.factor_cov().clone(), specific)?;
        ReconciledForecast::new(
            moments,
            vec![CovBlock {
                rows: (0..n_b).collect(),
                cov: ExtraCov::LowRank {
                    loadings: panel.h.clone(),
                    cov: r_h * kappa,
                },
            }],
        )
    }

    pub fn weights(&self) -> WeightSummary {
        let (n_b, k) = (self.n_b(), self.k());
        WeightSummary {
            mean: self.m_b.clone(),
            sd: DMatrix::from_fn(n_b, k, |i, c| self.c_b[i][(c, c)].max(0.0).sqrt()),
        }
    }
}
