//! Discounted learning of observation variances.

use nalgebra::{DMatrix, SymmetricEigen};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// Scalar variance learning: `n_t = δ n + 1`, `d_t = δ d + s e²/q*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceState {
    pub n: f64,
    pub d: f64,
}

impl VarianceState {
    pub fn new(n: f64, d: f64) -> Result<Self> {
        if !(n > 0.0 && d > 0.0) {
            return Err(Error::Numerical(format!("variance state needs n, d > 0 (got {n}, {d})")));
        }
        Ok(Self { n, d })
    }

    /// Point estimate `s = d / n`.
    pub fn s(&self) -> f64 {
        self.d / self.n
    }

    /// `q_star` is the forecast variance computed with the current `s`.
    pub fn update(&self, e: f64, q_star: f64, delta: f64) -> Self {
        let s = self.s();
        let q = q_star.max(super::svd::Q_FLOOR);
        Self {
            n: delta * self.n + 1.0,
            d: delta * self.d + s * e * e / q,
        }
    }
}

/// Matrix analogue for the factor observation covariance:
/// `D_t = δ D + S^{1/2} Q*^{-1/2} e e' Q*^{-1/2} S^{1/2}`, `S = D / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixVarianceState {
    pub n: f64,
    pub d: DMatrix<f64>,
}

fn sym_power(m: &DMatrix<f64>, power: f64) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(lmax > 0.0) {
        return Err(Error::Numerical("matrix power of a non-positive matrix".into()));
    }
    let vals = eig.eigenvalues.map(|l| l.max(1e-14 * lmax).powf(power));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

impl MatrixVarianceState {
    pub fn new(n: f64, d: DMatrix<f64>) -> Result<Self> {
        if !(n > 0.0) {
            return Err(Error::Numerical("matrix variance state needs n > 0".into()));
        }
        Ok(Self { n, d })
    }

    pub fn s(&self) -> DMatrix<f64> {
        &self.d / self.n
    }

    pub fn update(&self, e: &DVector<f64>, q_star: &DMatrix<f64>, delta: f64) -> Result<Self> {
        let s_half = sym_power(&self.s(), 0.5)?;
        let q_inv_half = sym_power(q_star, -0.5)?;
        let z = &s_half * (&q_inv_half * e);
        let mut d = &self.d * delta + &z * z.transpose();
        symmetrize(&mut d);
        Ok(Self {
            n: delta * self.n + 1.0,
            d,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn arithmetic_example() {
        let v = VarianceState::new(1.0, 1.0).unwrap().update(0.0, 1.0, 0.99);
        assert!((v.n - 1.99).abs() < 1e-15);
        assert!((v.d - 0.99).abs() < 1e-15);
        assert!((v.s() - 0.99 / 1.99).abs() < 1e-15);
    }

    #[test]
    fn unit_standardised_errors_are_a_fixed_point() {
        let mut v = VarianceState::new(2.0, 3.0).unwrap();
        let s0 = v.s();
        for _ in 0..100 {
            let q = v.s();
            v = v.update(q.sqrt(), q, 1.0);
        }
        assert!((v.s() - s0).abs() < 1e-12);
    }

    #[test]
    fn learns_true_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let true_var: f64 = 2.5;
        let noise = Normal::new(0.0, true_var.sqrt()).unwrap();
        let mut v = VarianceState::new(1.0, 1.0).unwrap();
        for _ in 0..2000 {
            let e: f64 = noise.sample(&mut rng);
            let q = v.s();
            v = v.update(e, q, 1.0);
        }
        assert!((v.s() - true_var).abs() / true_var < 0.1, "s = {}", v.s());
    }

    #[test]
    fn matrix_reduces_to_scalar() {
        let m = MatrixVarianceState::new(1.5, DMatrix::from_element(1, 1, 2.0)).unwrap();
        let s = VarianceState::new(1.5, 2.0).unwrap();
        let e = DVector::from_element(1, 0.7);
        let q = DMatrix::from_element(1, 1, 1.9);
        let mu = m.update(&e, &q, 0.95).unwrap();
        let su = s.update(0.7, 1.9, 0.95);
        assert!((mu.n - su.n).abs() < 1e-15);
        assert!((mu.d[(0, 0)] - su.d).abs() < 1e-12);
    }
}
