use nalgebra::{DMatrix, DVector};

use super::{check_inputs, inflation, init_weight_prior, observed, offsets, CombinationConfig, CovBlock, ExtraCov, ReconciledForecast, WeightSummary};
use crate::disagg::RegressorPanel;
use crate::error::{Error, Result};
use crate::factor::{GaussianFactorMoments, DEFAULT_DENSE_CAP};
use crate::linalg::{spd_solve, symmetrize};

/// Separate weights for every base series, `θ = (θ_1, …, θ_{n_b})`, with a
/// dense joint covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatCombination {
    pub(crate) k: usize,
    pub(crate) m: DVector<f64>,
    pub(crate) c: DMatrix<f64>,
    pub(crate) discount: f64,
    pub(crate) nu: Option<f64>,
}

/// `F'X` for the block-diagonal `F` built from `h`, restricted to `rows`.
fn ft_times(h: &DMatrix<f64>, rows: &[usize], x: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), x.ncols());
    for (r, &i) in rows.iter().enumerate() {
        for c in 0..k {
            let w = h[(i, c)];
            if w != 0.0 {
                let src = x.row(i * k + c);
                for (o, v) in out.row_mut(r).iter_mut().zip(src.iter()) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

impl FlatCombination {
    pub fn new(n_b: usize, k: usize, cfg: &CombinationConfig) -> Result<Self> {
        if n_b * k > DEFAULT_DENSE_CAP * 4 {
            return Err(Error::DenseCap {
                n: n_b * k,
                cap: DEFAULT_DENSE_CAP * 4,
            });
        }
        let (m0, v0) = init_weight_prior(k, cfg.prior_divisor)?;
        let m = DVector::from_fn(n_b * k, |j, _| m0[j % k]);
        let c = DMatrix::from_diagonal(&DVector::from_fn(n_b * k, |j, _| v0[j % k]));
        Ok(Self {
            k,
            m,
            c,
            discount: cfg.discount,
            nu: cfg.nu,
        })
    }

    pub fn n_b(&self) -> usize {
        self.m.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// One step on the base observations `b` (NaN entries are left out).
    /// `prior` supplies `V = Q̄` for the step.
    pub fn update(&mut self, panel: &RegressorPanel, prior: &GaussianFactorMoments, b: &[f64]) -> Result<()> {
        let (n_b, k) = (self.n_b(), self.k);
        check_inputs(panel, prior, k, n_b)?;
        if b.len() != n_b {
            return Err(Error::dim("combination observations", n_b, b.len()));
        }
        let rows = observed(b);
        let r = &self.c / self.discount;
        if rows.is_empty() {
            self.c = r;
            return Ok(());
        }
        let off = offsets(panel, prior);
        let fr = ft_times(&panel.h, &rows, &r, k);
        let mut q = ft_times(&panel.h, &rows, &fr.transpose(), k);
        let v = prior.select(&rows).dense_cov(DEFAULT_DENSE_CAP * 4)?;
        q += v;
        let mut e = DVector::zeros(rows.len());
        for (p, &i) in rows.iter().enumerate() {
            let mut f = off[i];
            let mut extra = 0.0;
            for c in 0..k {
                let j = i * k + c;
                f += panel.h[(i, c)] * self.m[j];
                extra += panel.var[(i, c)] * (self.m[j] * self.m[j] + r[(j, j)]);
            }
            q[(p, p)] += extra;
            e[p] = b[i] - f;
        }
        symmetrize(&mut q);
        let mut rhs = DMatrix::zeros(rows.len(), 1 + fr.ncols());
        rhs.column_mut(0).copy_from(&e);
        rhs.columns_mut(1, fr.ncols()).copy_from(&fr);
        let sol = spd_solve(&q, &rhs, "combination forecast covariance")?;
        let u = sol.column(0);
        let z = sol.columns(1, fr.ncols());
        self.m += fr.tr_mul(&u);
        let mut c = r - fr.tr_mul(&z);
        symmetrize(&mut c);
        self.c = c;
        Ok(())
    }

    /// Weight covariance `j` steps ahead with the one-step innovation held.
    fn cov_ahead(&self, horizon: usize) -> DMatrix<f64> {
        let w = &self.c * ((1.0 - self.discount) / self.discount);
        &self.c + w * horizon as f64
    }

    /// Reconciled base moments at `horizon` given that horizon's panel and
    /// prior.
    pub fn forecast(&self, panel: &RegressorPanel, prior: &GaussianFactorMoments, horizon: usize) -> Result<ReconciledForecast> {
        let (n_b, k) = (self.n_b(), self.k);
        check_inputs(panel, prior, k, n_b)?;
        let kappa = inflation(self.nu)?;
        let r = self.cov_ahead(horizon.max(1));
        let off = offsets(panel, prior);
        let all: Vec<usize> = (0..n_b).collect();
        let fr = ft_times(&panel.h, &all, &r, k);
        let frf = ft_times(&panel.h, &all, &fr.transpose(), k);
        let mut mean = off;
        let mut specific = prior.specific().clone();
        for i in 0..n_b {
            let (mut mhm, mut tr) = (0.0, 0.0);
            for c in 0..k {
                let j = i * k + c;
                mean[i] += panel.h[(i, c)] * self.m[j];
                mhm += panel.var[(i, c)] * self.m[j] * self.m[j];
                tr += panel.var[(i, c)] * r[(j, j)];
            }
            specific[i] = (kappa * (specific[i] - mhm + tr) + mhm).max(0.0);
        }
        let loadings = prior.loadings() * kappa.sqrt();
        let moments = GaussianFactorMoments::new(mean, loadings, prior.factor_cov().clone(), specific)?;
        ReconciledForecast::new(
            moments,
            vec![CovBlock {
                rows: all,
                cov: ExtraCov::Dense(frf * kappa),
            }],
        )
    }

    pub fn weights(&self) -> WeightSummary {
        let (n_b, k) = (self.n_b(), self.k);
        WeightSummary {
            mean: DMatrix::from_fn(n_b, k, |i, c| self.m[i * k + c]),
            sd: DMatrix::from_fn(n_b, k, |i, c| self.c[(i * k + c, i * k + c)].max(0.0).sqrt()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::stacked_step;
    use super::*;
    use crate::dlm::{Block, Component, Dlm, DlmSpec, ObsVariance, SvdState, VarianceState};
    use crate::factor::tests::random_moments;
    use crate::hierarchy::{fixtures, Hierarchy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn panel(h: DMatrix<f64>, var: DMatrix<f64>) -> RegressorPanel {
        let (n, k) = h.shape();
        RegressorPanel {
            sources: (0..k).map(|c| format!("L{c}")).collect(),
            present: vec![vec![true; k]; n],
            h,
            var,
        }
    }

    fn cfg(delta: f64) -> CombinationConfig {
        CombinationConfig {
            discount: delta,
            ..CombinationConfig::default()
        }
    }

    #[test]
    fn single_series_is_a_dynamic_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 2;
        let mut comb = FlatCombination::new(1, k, &cfg(0.95)).unwrap();
        let spec = DlmSpec::new(
            vec![Block {
                component: Component::Regression { k },
                discount: 0.95,
            }],
            1.0,
            ObsVariance::Fixed(0.7),
        )
        .unwrap();
        let st = SvdState::diagonal(DVector::zeros(k), &DVector::from_element(k, 0.0625));
        let mut dlm = Dlm::new(spec, st, VarianceState { n: 1.0, d: 0.7 }).unwrap();
        let prior = GaussianFactorMoments::diagonal(DVector::zeros(1), DVector::from_element(1, 0.7)).unwrap();
        for _ in 0..30 {
            let x: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..3.0)).collect();
            let y = 0.4 * x[0] + 0.6 * x[1] + rng.random_range(-0.5..0.5);
            let p = panel(DMatrix::from_row_slice(1, k, &x), DMatrix::zeros(1, k));
            comb.update(&p, &prior, &[y]).unwrap();
            dlm.step(Some(y), &x).unwrap();
            assert!((comb.m.clone() - &dlm.state.m).abs().max() < 1e-10);
            assert!((comb.c.clone() - dlm.state.cov()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn matches_stacked_oracle_without_regressor_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h: Hierarchy = fixtures::fig1();
        let s = h.summing().to_dense(100).unwrap();
        let (n_b, k) = (h.n_b(), 3);
        let prior = random_moments(&mut rng, n_b, 2);
        let v = prior.dense_cov(100).unwrap();
        let sv = &s * &v * s.transpose();
        let mut comb = FlatCombination::new(n_b, k, &cfg(0.97)).unwrap();
        let (mut m, mut c) = (comb.m.clone(), comb.c.clone());
        for _ in 0..40 {
            let hm = DMatrix::from_fn(n_b, k, |_, _| rng.random_range(0.5..2.0));
            let b: Vec<f64> = (0..n_b).map(|_| rng.random_range(0.0..4.0)).collect();
            comb.update(&panel(hm.clone(), DMatrix::zeros(n_b, k)), &prior, &b).unwrap();
            let mut ft = DMatrix::zeros(n_b, n_b * k);
            for i in 0..n_b {
                for cc in 0..k {
                    ft[(i, i * k + cc)] = hm[(i, cc)];
                }
            }
            let y = &s * DVector::from_column_slice(&b);
            (m, c) = stacked_step(&m, &c, 0.97, &(&s * ft), &sv, &y);
            assert!((comb.m.clone() - &m).abs().max() < 1e-8);
            assert!((comb.c.clone() - &c).abs().max() < 1e-8);
        }
    }

    #[test]
    fn learns_the_informative_regressor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nz = Normal::new(0.0, 1.0).unwrap();
        let h = fixtures::two_base();
        let (n_b, k) = (h.n_b(), 2);
        let prior = GaussianFactorMoments::diagonal(DVector::zeros(n_b), DVector::from_element(n_b, 0.25)).unwrap();
        let mut comb = FlatCombination::new(n_b, k, &cfg(0.99)).unwrap();
        for _ in 0..200 {
            let b: Vec<f64> = (0..n_b).map(|_| 10.0 + 3.0 * nz.sample(&mut rng)).collect();
            let hm = DMatrix::from_fn(n_b, k, |i, c| if c == 0 { b[i] + 0.5 * nz.sample(&mut rng) } else { 10.0 + 3.0 * nz.sample(&mut rng) });
            comb.update(&panel(hm, DMatrix::zeros(n_b, k)), &prior, &b).unwrap();
        }
        let w = comb.weights();
        for i in 0..n_b {
            assert!(w.mean[(i, 0)] > 0.8, "weight {}", w.mean[(i, 0)]);
            assert!(w.mean[(i, 0)] - 2.0 * w.sd[(i, 0)] > 0.0);
        }
    }

    #[test]
    fn forecast_with_known_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n_b, k) = (3, 2);
        let prior = random_moments(&mut rng, n_b, 1);
        let mut comb = FlatCombination::new(n_b, k, &cfg(1.0)).unwrap();
        comb.m = DVector::from_fn(n_b * k, |j, _| if j % k == 1 { 1.0 } else { 0.0 });
        comb.c = DMatrix::zeros(n_b * k, n_b * k);
        let hm = DMatrix::from_fn(n_b, k, |i, c| (i + 3 * c) as f64);
        let fc = comb.forecast(&panel(hm.clone(), DMatrix::zeros(n_b, k)), &prior, 1).unwrap();
        for i in 0..n_b {
            assert_eq!(fc.mean()[i], hm[(i, 1)]);
        }
        assert!((fc.dense_cov(10).unwrap() - prior.dense_cov(10).unwrap()).abs().max() < 1e-12);

        let zero = FlatCombination::new(n_b, k, &cfg(1.0)).unwrap();
        let fz = zero.forecast(&panel(hm, DMatrix::zeros(n_b, k)), &prior, 1).unwrap();
        assert!(fz.mean().iter().all(|v| *v == 0.0));
        assert!(fz.dense_cov(10).unwrap()[(0, 0)] >= prior.var(0));
    }

    /// Against exact moments of `h'θ` with independent random `h` and `θ`.
    #[test]
    fn forecast_matches_moment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n_b, k) = (4, 3);
        let prior = random_moments(&mut rng, n_b, 2);
        let mut comb = FlatCombination::new(n_b, k, &cfg(0.9)).unwrap();
        comb.m = DVector::from_fn(n_b * k, |_, _| rng.random_range(-0.5..1.0));
        let a = DMatrix::from_fn(n_b * k, n_b * k, |_, _| rng.random_range(-0.3..0.3));
        comb.c = &a * a.transpose();
        let hm = DMatrix::from_fn(n_b, k, |_, _| rng.random_range(0.0..5.0));
        let hv = DMatrix::from_fn(n_b, k, |_, _| rng.random_range(0.0..0.4));
        let horizon = 2;
        let fc = comb.forecast(&panel(hm.clone(), hv.clone()), &prior, horizon).unwrap();
        let r = &comb.c / 0.9 + &comb.c * (0.1 / 0.9);
        let mut exact = DMatrix::zeros(n_b, n_b);
        let mut mhm = DVector::zeros(n_b);
        for i in 0..n_b {
            for j in 0..n_b {
                for a in 0..k {
                    for b in 0..k {
                        exact[(i, j)] += hm[(i, a)] * r[(i * k + a, j * k + b)] * hm[(j, b)];
                    }
                }
            }
            for a in 0..k {
                let idx = i * k + a;
                exact[(i, i)] += hv[(i, a)] * (comb.m[idx] * comb.m[idx] + r[(idx, idx)]);
                mhm[i] += hv[(i, a)] * comb.m[idx] * comb.m[idx];
            }
        }
        let revised = prior.dense_cov(10).unwrap() - DMatrix::from_diagonal(&mhm);
        let diff = fc.dense_cov(10).unwrap() - revised - exact;
        assert!(diff.abs().max() < 1e-9, "{diff}");
    }

    #[test]
    fn noise_free_regressors_reduce_to_prior_plus_weight_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n_b, k) = (3, 2);
        let prior = random_moments(&mut rng, n_b, 1);
        let mut c = cfg(0.95);
        c.nu = Some(8.0);
        let comb = FlatCombination::new(n_b, k, &c).unwrap();
        let hm = DMatrix::from_fn(n_b, k, |_, _| rng.random_range(0.0..2.0));
        let fc = comb.forecast(&panel(hm.clone(), DMatrix::zeros(n_b, k)), &prior, 1).unwrap();
        let r = comb.cov_ahead(1);
        let mut ft = DMatrix::zeros(n_b, n_b * k);
        for i in 0..n_b {
            for cc in 0..k {
                ft[(i, i * k + cc)] = hm[(i, cc)];
            }
        }
        let expect = (prior.dense_cov(10).unwrap() + &ft * r * ft.transpose()) * (8.0 / 6.0);
        assert!((fc.dense_cov(10).unwrap() - expect).abs().max() < 1e-12);
    }

    #[test]
    fn negative_weights_are_not_clipped() {
        let h = fixtures::two_base();
        let prior = GaussianFactorMoments::diagonal(DVector::zeros(2), DVector::from_element(2, 0.01)).unwrap();
        let mut comb = FlatCombination::new(h.n_b(), 1, &cfg(1.0)).unwrap();
        for _ in 0..20 {
            comb.update(&panel(DMatrix::from_element(2, 1, 1.0), DMatrix::zeros(2, 1)), &prior, &[-1.0, -1.0]).unwrap();
        }
        assert!(comb.m.iter().all(|w| *w < -0.5));
    }
}
