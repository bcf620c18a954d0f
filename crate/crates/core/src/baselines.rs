//! Reference reconciliations: bottom-up with diagonal or shrunk base
//! covariance, and MinT with OLS, WLS or shrinkage weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;
use crate::hierarchy::SummingMatrix;
use crate::linalg::{psd_factor, spd_solve, symmetrize};

/// Correlation shrinkage toward the identity with analytic intensity.
///
/// The shrunk covariance `(1 − λ) S + λ diag(S)` is kept in factor form:
/// loadings are the centred residuals over `√(T − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkCov {
    pub lambda: f64,
    /// Sample standard deviations.
    pub sd: DVector<f64>,
    /// Standardised, centred residuals (`n × T`) over `√(T − 1)`, or an
    /// `n × n` square root of their Gram matrix when `T > n`.
    std_loadings: DMatrix<f64>,
}

/// Estimates the shrinkage intensity `λ = Σ Var(r_ij) / Σ r_ij²` over `i ≠ j`,
/// clipped to `[0, 1]`, from `T × n` residuals. Costs `O(n T²)`.
pub fn shrink_cov(residuals: &DMatrix<f64>) -> Result<ShrunkCov> {
    let (t, n) = residuals.shape();
    if t < 2 {
        return Err(Error::Data(format!("shrinkage needs at least 2 residual rows, got {t}")));
    }
    if residuals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("shrinkage residuals contain non-finite values".into()));
    }
    let tf = t as f64;
    let mut y = DMatrix::zeros(t, n);
    let mut sd = DVector::zeros(n);
    for j in 0..n {
        let col = residuals.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (tf - 1.0);
        sd[j] = var.sqrt();
        if var > 0.0 {
            for i in 0..t {
                y[(i, j)] = (col[i] - mean) / sd[j];
            }
        }
    }
    let lambda = if t < 3 || n < 2 {
        1.0
    } else {
        // w_tij = y_ti y_tj; sums over i ≠ j through T × T Gram matrices
        let gram = &y * y.transpose();
        let row_sq: Vec<f64> = (0..t).map(|i| y.row(i).norm_squared()).collect();
        let frob_yty: f64 = gram.norm_squared();
        let diag_wbar_sq: f64 = (0..n)
            .map(|j| {
                let s: f64 = y.column(j).norm_squared() / tf;
                s * s
            })
            .sum();
        let diag_w_sq: f64 = y.iter().map(|v| v.powi(4)).sum();
        let sum_w_sq: f64 = row_sq.iter().map(|s| s * s).sum::<f64>() - diag_w_sq;
        let sum_wbar_sq = frob_yty / (tf * tf) - diag_wbar_sq;
        let var_sum = tf / (tf - 1.0).powi(3) * (sum_w_sq - tf * sum_wbar_sq);
        let r_sq = (tf / (tf - 1.0)).powi(2) * sum_wbar_sq;
        if r_sq > 0.0 {
            (var_sum / r_sq).clamp(0.0, 1.0)
        } else {
            1.0
        }
    };
    let mut std_loadings = y.transpose() / (tf - 1.0).sqrt();
    if t > n {
        std_loadings = psd_factor(&(&std_loadings * std_loadings.transpose()));
    }
    Ok(ShrunkCov {
        lambda,
        sd,
        std_loadings,
    })
}

impl ShrunkCov {
    pub fn n(&self) -> usize {
        self.sd.len()
    }

    /// Shrunk correlation with the supplied variances on the diagonal, in
    /// factor form.
    pub fn with_variances(&self, mean: DVector<f64>, var: &DVector<f64>) -> Result<GaussianFactorMoments> {
        let n = self.n();
        if var.len() != n || mean.len() != n {
            return Err(Error::dim("shrunk covariance variances", n, var.len()));
        }
        let t = self.std_loadings.ncols();
        let mut loadings = self.std_loadings.clone();
        let mut specific = DVector::zeros(n);
        for i in 0..n {
            let s = var[i].max(0.0).sqrt();
            let r_ii = loadings.row(i).norm_squared();
            loadings.row_mut(i).scale_mut(s);
            specific[i] = (var[i] * (1.0 - (1.0 - self.lambda) * r_ii)).max(0.0);
        }
        let sigma = DMatrix::identity(t, t) * (1.0 - self.lambda);
        GaussianFactorMoments::new(mean, loadings, sigma, specific)
    }

    /// `(1 − λ) S + λ diag(S)` in factor form.
    pub fn moments(&self, mean: DVector<f64>) -> Result<GaussianFactorMoments> {
        let var = self.sd.map(|s| s * s);
        self.with_variances(mean, &var)
    }

    pub fn dense(&self, cap: usize) -> Result<DMatrix<f64>> {
        self.moments(DVector::zeros(self.n()))?.dense_cov(cap)
    }
}

/// Forecast-error weighting for MinT.
#[derive(Debug, Clone, PartialEq)]
pub enum MintMode {
    Ols,
    Wls(DVector<f64>),
    /// `T × n` in-sample residuals of the exogenous forecasts.
    Shrink(DMatrix<f64>),
    /// A supplied covariance.
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MintResult {
    /// Reconciled base means `G ŷ`.
    pub base: DVector<f64>,
    /// `G = (S'W⁻¹S)⁻¹ S'W⁻¹`.
    pub g: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl MintResult {
    pub fn full_mean(&self, s: &SummingMatrix) -> Result<Vec<f64>> {
        s.mul_vec(self.base.as_slice())
    }

    /// `G W G'`.
    pub fn base_cov(&self) -> DMatrix<f64> {
        let mut c = &self.g * &self.w * self.g.transpose();
        symmetrize(&mut c);
        c
    }

    /// `S G W G' S'`.
    pub fn full_cov(&self, s: &SummingMatrix) -> Result<DMatrix<f64>> {
        let sg = s.mul_mat(&self.base_cov())?;
        let mut full = s.mul_mat(&sg.transpose())?;
        symmetrize(&mut full);
        Ok(full)
    }
}

/// Trace-minimising reconciliation of the full forecast vector `ŷ`.
pub fn mint(y_hat: &DVector<f64>, s: &SummingMatrix, mode: &MintMode, cap: usize) -> Result<MintResult> {
    let n = s.n();
    if y_hat.len() != n {
        return Err(Error::dim("MinT forecasts", n, y_hat.len()));
    }
    let sd = s.to_dense(cap)?;
    let w = match mode {
        MintMode::Ols => DMatrix::identity(n, n),
        MintMode::Wls(v) => {
            if v.len() != n {
                return Err(Error::dim("MinT variances", n, v.len()));
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Numerical("MinT WLS variances must be positive".into()));
            }
            DMatrix::from_diagonal(v)
        }
        MintMode::Shrink(res) => {
            if res.ncols() != n {
                return Err(Error::dim("MinT residual columns", n, res.ncols()));
            }
            shrink_cov(res)?.dense(cap)?
        }
        MintMode::Dense(w) => {
            if w.nrows() != n || w.ncols() != n {
                return Err(Error::dim("MinT covariance", n, w.nrows()));
            }
            w.clone()
        }
    };
    let winv_s = spd_solve(&w, &sd, "MinT forecast-error covariance")?;
    let mut normal = sd.tr_mul(&winv_s);
    symmetrize(&mut normal);
    let g = spd_solve(&normal, &winv_s.transpose(), "MinT normal equations").map_err(|_| {
        Error::Numerical("S'W⁻¹S is singular".into())
    })?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("S'W⁻¹S is singular".into()));
    }
    let base = &g * y_hat;
    Ok(MintResult { base, g, w })
}

/// Covariance used for bottom-up forecasts.
#[derive(Debug, Clone, PartialEq)]
pub enum BuMode {
    Diag,
    /// `T × n_b` base residuals.
    Shrink(DMatrix<f64>),
}

/// Bottom-up base moments; the hierarchy follows from `project`.
pub fn bottom_up(mean: &DVector<f64>, var: &DVector<f64>, mode: &BuMode) -> Result<GaussianFactorMoments> {
    match mode {
        BuMode::Diag => GaussianFactorMoments::diagonal(mean.clone(), var.clone()),
        BuMode::Shrink(res) => {
            if res.ncols() != mean.len() {
                return Err(Error::dim("bottom-up residual columns", mean.len(), res.ncols()));
            }
            shrink_cov(res)?.with_variances(mean.clone(), var)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{fixtures, Hierarchy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Direct pairwise implementation of the intensity.
    fn lambda_oracle(x: &DMatrix<f64>) -> f64 {
        let (t, n) = x.shape();
        let tf = t as f64;
        let mut y = x.clone();
        for j in 0..n {
            let m = x.column(j).mean();
            let sd = (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / (tf - 1.0)).sqrt();
            for i in 0..t {
                y[(i, j)] = (x[(i, j)] - m) / sd;
            }
        }
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w: Vec<f64> = (0..t).map(|k| y[(k, i)] * y[(k, j)]).collect();
                let wbar = w.iter().sum::<f64>() / tf;
                num += tf / (tf - 1.0).powi(3) * w.iter().map(|v| (v - wbar).powi(2)).sum::<f64>();
                den += (tf / (tf - 1.0) * wbar).powi(2);
            }
        }
        (num / den).clamp(0.0, 1.0)
    }

    #[test]
    fn intensity_matches_pairwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let t = rng.random_range(4..30);
            let n = rng.random_range(2..8);
            let x = DMatrix::from_fn(t, n, |_, _| rng.random_range(-1.0..1.0));
            let s = shrink_cov(&x).unwrap();
            assert!((s.lambda - lambda_oracle(&x)).abs() < 1e-10);
        }
    }

    #[test]
    fn independent_columns_shrink_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nz = Normal::new(0.0, 1.0).unwrap();
        let x = DMatrix::from_fn(2000, 5, |_, _| nz.sample(&mut rng));
        let s = shrink_cov(&x).unwrap();
        assert!(s.lambda > 0.3, "λ = {}", s.lambda);
        let d = s.dense(10).unwrap();
        assert!(d[(0, 1)].abs() < 0.03);
    }

    #[test]
    fn two_rows_shrink_fully() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 4.0, 0.0]);
        assert_eq!(shrink_cov(&x).unwrap().lambda, 1.0);
    }

    #[test]
    fn correlated_pair_keeps_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nz = Normal::new(0.0, 1.0).unwrap();
        let x = DMatrix::from_fn(500, 2, |_, _| 0.0);
        let mut x = x;
        for i in 0..500 {
            let z: f64 = nz.sample(&mut rng);
            x[(i, 0)] = z;
            x[(i, 1)] = z + 0.05 * nz.sample(&mut rng);
        }
        let s = shrink_cov(&x).unwrap();
        assert!(s.lambda < 0.05);
        let d = s.dense(10).unwrap();
        assert!(d[(0, 1)] / (d[(0, 0)] * d[(1, 1)]).sqrt() > 0.9);
    }

    #[test]
    fn zero_variance_column_is_independent() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 3.0, 2.0, 3.0, 0.0, 3.0, 5.0, 3.0]);
        let d = shrink_cov(&x).unwrap().dense(10).unwrap();
        assert_eq!(d[(0, 1)], 0.0);
        assert_eq!(d[(1, 1)], 0.0);
    }

    fn small() -> Hierarchy {
        fixtures::two_base()
    }

    #[test]
    fn ols_hand_example() {
        let h = small();
        let y = DVector::from_vec(vec![2.0, 0.5, 1.0]);
        let r = mint(&y, h.summing(), &MintMode::Ols, 100).unwrap();
        assert!((r.base[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.base[1] - 7.0 / 6.0).abs() < 1e-12);
        assert!((r.full_mean(h.summing()).unwrap()[0] - 11.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn coherent_input_is_fixed_and_wls_scale_free() {
        let h = fixtures::fig1();
        let b: Vec<f64> = (0..10).map(|i| i as f64 + 0.5).collect();
        let y = DVector::from_vec(h.aggregate(&b).unwrap());
        let r = mint(&y, h.summing(), &MintMode::Ols, 100).unwrap();
        assert!((r.base.clone() - DVector::from_vec(b)).abs().max() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let yh = DVector::from_fn(h.n(), |_, _| rng.random_range(0.0..5.0));
        let a = mint(&yh, h.summing(), &MintMode::Ols, 100).unwrap();
        let w = mint(&yh, h.summing(), &MintMode::Wls(DVector::from_element(h.n(), 3.7)), 100).unwrap();
        assert!((a.base - w.base).abs().max() < 1e-12);
    }

    #[test]
    fn bottom_up_modes() {
        let h = small();
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let d = bottom_up(&m, &v, &BuMode::Diag).unwrap();
        let p = d.project(h.summing()).unwrap();
        assert_eq!(p.var(0), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let res = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-1.0..1.0));
        let s = bottom_up(&m, &v, &BuMode::Shrink(res.clone())).unwrap();
        assert_eq!(s.mean(), d.mean());
        let sh = shrink_cov(&res).unwrap();
        let r = sh.dense(10).unwrap();
        let corr = r[(0, 1)] / (r[(0, 0)] * r[(1, 1)]).sqrt();
        let dense = s.dense_cov(10).unwrap();
        assert!((dense[(0, 1)] - corr).abs() < 1e-12);
        assert!((dense[(0, 0)] - 1.0).abs() < 1e-12);
    }
}
