//! Low-rank-plus-diagonal covariance `Δ Σ Δ' + D` and the algebra on it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::hierarchy::SummingMatrix;
use crate::linalg::{median, psd_factor, symmetrize};

/// Default cap on the number of series for which a dense covariance is built.
pub const DEFAULT_DENSE_CAP: usize = 2_000;

/// Mean and factor-form covariance of the base series.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFactorMoments {
    mean: DVector<f64>,
    loadings: DMatrix<f64>,
    factor_cov: DMatrix<f64>,
    specific: DVector<f64>,
}

impl GaussianFactorMoments {
    pub fn new(
        mean: DVector<f64>,
        loadings: DMatrix<f64>,
        factor_cov: DMatrix<f64>,
        specific: DVector<f64>,
    ) -> Result<Self> {
        let n_b = mean.len();
        if loadings.nrows() != n_b {
            return Err(Error::dim("factor loadings rows", n_b, loadings.nrows()));
        }
        if specific.len() != n_b {
            return Err(Error::dim("specific variances", n_b, specific.len()));
        }
        let n_x = loadings.ncols();
        if factor_cov.nrows() != n_x || factor_cov.ncols() != n_x {
            return Err(Error::dim("factor covariance", n_x, factor_cov.nrows()));
        }
        if let Some(v) = specific.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Numerical(format!("specific variance {v} is negative or NaN")));
        }
        let mut sigma = factor_cov;
        symmetrize(&mut sigma);
        if n_x > 0 {
            let trace = sigma.trace().abs();
            let eig = SymmetricEigen::new(sigma.clone());
            let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if lmin < -1e-10 * trace.max(f64::MIN_POSITIVE) || !lmin.is_finite() {
                return Err(Error::Numerical(format!(
                    "factor covariance is not PSD (smallest eigenvalue {lmin:e})"
                )));
            }
        }
        Ok(Self {
            mean,
            loadings,
            factor_cov: sigma,
            specific,
        })
    }

    /// Independent series: no factors.
    pub fn diagonal(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DMatrix::zeros(n, 0), DMatrix::zeros(0, 0), var)
    }

    pub fn n_b(&self) -> usize {
        self.mean.len()
    }

    pub fn n_x(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn factor_cov(&self) -> &DMatrix<f64> {
        &self.factor_cov
    }

    pub fn specific(&self) -> &DVector<f64> {
        &self.specific
    }

    /// Number of scalars held: mean, loadings, factor covariance and specifics.
    pub fn storage_len(&self) -> usize {
        let (n_b, n_x) = (self.n_b(), self.n_x());
        n_b * (n_x + 2) + n_x * n_x
    }

    fn check_len(&self, c: &DVector<f64>, context: &'static str) -> Result<()> {
        if c.len() != self.n_b() {
            return Err(Error::dim(context, self.n_b(), c.len()));
        }
        Ok(())
    }

    /// `Q̄ c` without forming `Q̄`.
    pub fn cov_vec(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(c, "cov_vec")?;
        let z = &self.factor_cov * (self.loadings.tr_mul(c));
        Ok(&self.loadings * z + self.specific.component_mul(c))
    }

    /// `c' Q̄ c`.
    pub fn quad_form(&self, c: &DVector<f64>) -> Result<f64> {
        self.check_len(c, "quad_form")?;
        let dc = self.loadings.tr_mul(c);
        let common = dc.dot(&(&self.factor_cov * &dc));
        let spec: f64 = c.iter().zip(self.specific.iter()).map(|(a, d)| a * a * d).sum();
        Ok((common + spec).max(0.0))
    }

    /// `Δ' c` for the 0/1 vector with ones at `cols`.
    fn loadings_sum(&self, cols: &[usize]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_x());
        for &j in cols {
            out += self.loadings.row(j).transpose();
        }
        out
    }

    /// `Q̄ c` for the 0/1 vector with ones at `cols`.
    pub fn cov_indicator(&self, cols: &[usize]) -> DVector<f64> {
        let z = &self.factor_cov * self.loadings_sum(cols);
        let mut out = &self.loadings * z;
        for &j in cols {
            out[j] += self.specific[j];
        }
        out
    }

    /// `c' Q̄ c` for the 0/1 vector with ones at `cols`.
    pub fn quad_indicator(&self, cols: &[usize]) -> f64 {
        let dc = self.loadings_sum(cols);
        let common = dc.dot(&(&self.factor_cov * &dc));
        let spec: f64 = cols.iter().map(|&j| self.specific[j]).sum();
        (common + spec).max(0.0)
    }

    /// Marginal variance of base series `i`.
    pub fn var(&self, i: usize) -> f64 {
        let l = self.loadings.row(i);
        (l * &self.factor_cov * l.transpose())[(0, 0)] + self.specific[i]
    }

    /// All marginal variances in `O(n_b n_x²)`.
    pub fn variances(&self) -> DVector<f64> {
        let ls = &self.loadings * &self.factor_cov;
        DVector::from_fn(self.n_b(), |i, _| {
            ls.row(i).dot(&self.loadings.row(i)) + self.specific[i]
        })
    }

    /// Dense `Q̄`, refused above `cap` series.
    pub fn dense_cov(&self, cap: usize) -> Result<DMatrix<f64>> {
        if self.n_b() > cap {
            return Err(Error::DenseCap { n: self.n_b(), cap });
        }
        let mut q = &self.loadings * &self.factor_cov * self.loadings.transpose();
        for i in 0..self.n_b() {
            q[(i, i)] += self.specific[i];
        }
        Ok(q)
    }

    /// Moments of the listed base series.
    pub fn select(&self, rows: &[usize]) -> GaussianFactorMoments {
        GaussianFactorMoments {
            mean: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.mean[i])),
            loadings: self.loadings.select_rows(rows),
            factor_cov: self.factor_cov.clone(),
            specific: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.specific[i])),
        }
    }

    /// Prepares the Woodbury solve and determinant.
    pub fn factorize(&self) -> Result<FactorSolver> {
        FactorSolver::new(self)
    }

    /// `Q̄⁻¹ rhs`.
    pub fn woodbury_solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.factorize()?.solve(rhs)
    }

    /// `log det Q̄`.
    pub fn logdet(&self) -> Result<f64> {
        Ok(self.factorize()?.logdet())
    }

    /// Moments of every series in the hierarchy spanned by `s`.
    pub fn project<'a>(&'a self, s: &'a SummingMatrix) -> Result<ProjectedMoments<'a>> {
        ProjectedMoments::new(self, s)
    }
}

/// One factorization of `Q̄` reused for solves, quadratic forms and the
/// determinant.
///
/// With `L = Δ Σ^{1/2}`, `M = I + L' D⁻¹ L = P Γ P'` and
/// `B = D⁻¹ L P Γ^{-1/2}`, the inverse is `D⁻¹ − B B'`.
#[derive(Debug, Clone)]
pub struct FactorSolver {
    d_inv: DVector<f64>,
    b: DMatrix<f64>,
    logdet: f64,
}

impl FactorSolver {
    fn new(fc: &GaussianFactorMoments) -> Result<Self> {
        let n_b = fc.n_b();
        let d = floor_specific(fc)?;
        let d_inv = d.map(|v| 1.0 / v);
        let sqrt_sigma = psd_factor(&fc.factor_cov);
        let l = &fc.loadings * sqrt_sigma;
        let r = l.ncols();
        let mut logdet: f64 = d.iter().map(|v| v.ln()).sum();
        if r == 0 {
            return Ok(Self {
                d_inv,
                b: DMatrix::zeros(n_b, 0),
                logdet,
            });
        }
        let mut k = l.clone();
        for (i, mut row) in k.row_iter_mut().enumerate() {
            row *= d_inv[i];
        }
        let mut inner = DMatrix::identity(r, r) + l.tr_mul(&k);
        symmetrize(&mut inner);
        let eig = SymmetricEigen::new(inner);
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let floor = 1e-12 * lmax;
        let mut scale = eig.eigenvectors.clone();
        for c in 0..r {
            let g = eig.eigenvalues[c].max(floor);
            logdet += g.ln();
            let s = 1.0 / g.sqrt();
            for row in 0..r {
                scale[(row, c)] *= s;
            }
        }
        Ok(Self {
            d_inv,
            b: k * scale,
            logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.d_inv.len()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn solve_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim("woodbury solve", self.dim(), x.len()));
        }
        let bx = self.b.tr_mul(x);
        Ok(self.d_inv.component_mul(x) - &self.b * bx)
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.dim() {
            return Err(Error::dim("woodbury solve", self.dim(), rhs.nrows()));
        }
        let btr = self.b.tr_mul(rhs);
        let mut out = &self.b * btr;
        out.neg_mut();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row += rhs.row(i) * self.d_inv[i];
        }
        Ok(out)
    }

    /// Diagonal of `Q̄⁻¹`.
    pub fn inv_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.d_inv[i] - self.b.row(i).norm_squared())
    }

    /// `x' Q̄⁻¹ x`.
    pub fn quad_inv(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim("woodbury quadratic form", self.dim(), x.len()));
        }
        let diag: f64 = x.iter().zip(self.d_inv.iter()).map(|(v, d)| v * v * d).sum();
        Ok(diag - self.b.tr_mul(x).norm_squared())
    }
}

/// Specific variances floored at `1e-10 × median`, falling back to the max
/// when the median is zero.
fn floor_specific(fc: &GaussianFactorMoments) -> Result<DVector<f64>> {
    let d = fc.specific.as_slice();
    let mut eps = 1e-10 * median(d);
    if !(eps > 0.0) {
        eps = 1e-10 * d.iter().cloned().fold(0.0, f64::max);
    }
    if !(eps > 0.0) {
        let common = fc.variances().max();
        return Err(Error::NumericalRank {
            context: "factor covariance with zero specific variances",
            suggested_jitter: if common > 0.0 { 1e-8 * common } else { 1e-8 },
        });
    }
    Ok(fc.specific.map(|v| v.max(eps)))
}

/// Hierarchy-wide view of base moments through `S`, never materialising the
/// `n × n` covariance unless asked.
#[derive(Debug, Clone)]
pub struct ProjectedMoments<'a> {
    base: &'a GaussianFactorMoments,
    s: &'a SummingMatrix,
    mean: DVector<f64>,
    loadings: DMatrix<f64>,
}

impl<'a> ProjectedMoments<'a> {
    fn new(base: &'a GaussianFactorMoments, s: &'a SummingMatrix) -> Result<Self> {
        if s.n_b() != base.n_b() {
            return Err(Error::dim("project: S columns", base.n_b(), s.n_b()));
        }
        let mean = DVector::from_vec(s.mul_vec(base.mean.as_slice())?);
        let loadings = s.mul_mat(&base.loadings)?;
        Ok(Self {
            base,
            s,
            mean,
            loadings,
        })
    }

    pub fn n(&self) -> usize {
        self.s.n()
    }

    /// `S f̄`.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `S Δ`.
    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    /// `s_i' (Δ Σ Δ' + D) s_j`.
    pub fn cov(&self, i: usize, j: usize) -> f64 {
        let li = self.loadings.row(i);
        let lj = self.loadings.row(j);
        let common = (li * &self.base.factor_cov * lj.transpose())[(0, 0)];
        let (ri, rj) = (self.s.row(i), self.s.row(j));
        let (mut a, mut b, mut spec) = (0, 0, 0.0);
        while a < ri.len() && b < rj.len() {
            match ri[a].cmp(&rj[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    spec += self.base.specific[ri[a]];
                    a += 1;
                    b += 1;
                }
            }
        }
        common + spec
    }

    pub fn var(&self, i: usize) -> f64 {
        let li = self.loadings.row(i);
        let common = (li * &self.base.factor_cov * li.transpose())[(0, 0)];
        common + self.s.row(i).iter().map(|&j| self.base.specific[j]).sum::<f64>()
    }

    pub fn variances(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| self.var(i))
    }

    /// Dense `S Q̄ S'`, refused above `cap` series.
    pub fn dense_cov(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > cap {
            return Err(Error::DenseCap { n, cap });
        }
        Ok(DMatrix::from_fn(n, n, |i, j| self.cov(i, j)))
    }

    /// Joint moments of the listed rows when they cover disjoint base sets
    /// (true of every level of a hierarchy); the result keeps factor form.
    pub fn rows_factor_form(&self, rows: &[usize]) -> Option<GaussianFactorMoments> {
        if !self.s.rows_disjoint(rows) {
            return None;
        }
        let specific = DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&i| self.s.row(i).iter().map(|&j| self.base.specific[j]).sum()),
        );
        Some(GaussianFactorMoments {
            mean: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.mean[i])),
            loadings: self.loadings.select_rows(rows),
            factor_cov: self.base.factor_cov.clone(),
            specific,
        })
    }

    /// Dense covariance of the listed rows.
    pub fn rows_dense_cov(&self, rows: &[usize], cap: usize) -> Result<DMatrix<f64>> {
        if rows.len() > cap {
            return Err(Error::DenseCap { n: rows.len(), cap });
        }
        Ok(DMatrix::from_fn(rows.len(), rows.len(), |a, b| self.cov(rows[a], rows[b])))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hierarchy::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn worked_example() -> GaussianFactorMoments {
        GaussianFactorMoments::new(
            DVector::zeros(2),
            DMatrix::from_element(2, 1, 0.5f64.sqrt()),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(2, 0.5),
        )
        .unwrap()
    }

    pub(crate) fn random_moments(rng: &mut impl Rng, n_b: usize, n_x: usize) -> GaussianFactorMoments {
        let mean = DVector::from_fn(n_b, |_, _| rng.random_range(-1.0..1.0));
        let loadings = DMatrix::from_fn(n_b, n_x, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(n_x, n_x, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(n_x, n_x) * 0.1;
        let specific = DVector::from_fn(n_b, |_, _| rng.random_range(0.1..2.0));
        GaussianFactorMoments::new(mean, loadings, sigma, specific).unwrap()
    }

    #[test]
    fn worked_example_cov_and_quad() {
        let fc = worked_example();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let q = fc.cov_vec(&c).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);
        assert!((fc.quad_form(&c).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(fc.quad_form(&DVector::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn trivial_diagonal_cov_vec() {
        let fc = GaussianFactorMoments::diagonal(DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap();
        let q = fc.cov_vec(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(q.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn worked_example_inverse_and_logdet() {
        let fc = worked_example();
        let inv = fc.woodbury_solve(&DMatrix::identity(2, 2)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[4.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0, 4.0 / 3.0]);
        assert!((inv - expect).abs().max() < 1e-12);
        assert!((fc.logdet().unwrap() - 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn diagonal_solve_and_logdet() {
        let fc = GaussianFactorMoments::diagonal(DVector::zeros(2), DVector::from_vec(vec![2.0, 4.0])).unwrap();
        let x = fc.woodbury_solve(&DMatrix::from_column_slice(2, 1, &[1.0, 1.0])).unwrap();
        assert_eq!(x.as_slice(), &[0.5, 0.25]);
        let unit = GaussianFactorMoments::diagonal(DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap();
        assert_eq!(unit.logdet().unwrap(), 0.0);
    }

    #[test]
    fn zero_specific_is_rank_error() {
        let fc = GaussianFactorMoments::new(
            DVector::zeros(2),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(2),
        )
        .unwrap();
        assert!(matches!(fc.logdet(), Err(Error::NumericalRank { .. })));
    }

    #[test]
    fn non_psd_factor_cov_rejected() {
        let r = GaussianFactorMoments::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            DVector::from_element(1, 1.0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn storage_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fc = random_moments(&mut rng, 40, 3);
        assert_eq!(fc.storage_len(), 40 * 5 + 9);
    }

    #[test]
    fn random_instances_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n_b = rng.random_range(1..60);
            let n_x = rng.random_range(0..6);
            let fc = random_moments(&mut rng, n_b, n_x);
            let q = fc.dense_cov(1000).unwrap();
            let c = DVector::from_fn(n_b, |_, _| rng.random_range(-1.0..1.0));
            assert!((fc.cov_vec(&c).unwrap() - &q * &c).abs().max() < 1e-12);
            let quad = c.dot(&(&q * &c));
            assert!((fc.quad_form(&c).unwrap() - quad).abs() <= 1e-12 * quad.abs().max(1.0));
            let x = fc.woodbury_solve(&DMatrix::identity(n_b, n_b)).unwrap();
            assert!((&q * x - DMatrix::identity(n_b, n_b)).abs().max() < 1e-8);
            let ld = q.clone().cholesky().unwrap().determinant().ln();
            assert!((fc.logdet().unwrap() - ld).abs() < 1e-9);
            let v = fc.variances();
            for i in 0..n_b {
                assert!((v[i] - q[(i, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quad_inv_matches_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fc = random_moments(&mut rng, 30, 4);
        let f = fc.factorize().unwrap();
        let x = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let direct = x.dot(&f.solve_vec(&x).unwrap());
        assert!((f.quad_inv(&x).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn project_two_base() {
        let h = fixtures::two_base();
        let fc = GaussianFactorMoments::diagonal(DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap();
        let p = fc.project(h.summing()).unwrap();
        assert_eq!(p.var(0), 2.0);
        assert_eq!(p.cov(0, 1), 1.0);
        let w = worked_example();
        let p = w.project(h.summing()).unwrap();
        assert!((p.var(0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn project_fig1_and_dense() {
        let h = fixtures::fig1();
        let fc = GaussianFactorMoments::diagonal(DVector::zeros(10), DVector::from_element(10, 1.0)).unwrap();
        let p = fc.project(h.summing()).unwrap();
        assert_eq!(p.var(h.index_of("A").unwrap()), 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fc = random_moments(&mut rng, 10, 2);
        let p = fc.project(h.summing()).unwrap();
        let s = h.summing().to_dense(100).unwrap();
        let full = &s * fc.dense_cov(100).unwrap() * s.transpose();
        assert!((p.dense_cov(100).unwrap() - &full).abs().max() < 1e-12);
        assert!(matches!(p.dense_cov(5), Err(Error::DenseCap { .. })));

        let level = h.rows_in_level("L1");
        let lv = p.rows_factor_form(&level).unwrap();
        let dense = lv.dense_cov(100).unwrap();
        for (a, &i) in level.iter().enumerate() {
            for (b, &j) in level.iter().enumerate() {
                assert!((dense[(a, b)] - full[(i, j)]).abs() < 1e-12);
            }
        }
    }
}
