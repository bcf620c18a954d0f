//! Small dense helpers shared by the filters and the covariance algebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `L` with `L L' = m` for symmetric PSD `m`; negative eigenvalues are clipped
/// and columns with zero eigenvalue dropped.
pub(crate) fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 1e-14 * lmax.max(f64::MIN_POSITIVE)).collect();
    let mut out = DMatrix::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        for r in 0..n {
            out[(r, c)] = eig.eigenvectors[(r, k)] * s;
        }
    }
    out
}

/// Square root `N` with `N' N = m^{-1}` for symmetric positive definite `m`.
pub(crate) fn inverse_sqrt_rows(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(lmax > 0.0) {
        return Err(Error::Numerical(format!("{context}: matrix is not positive definite")));
    }
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l <= 1e-12 * lmax {
            return Err(Error::NumericalRank {
                context,
                suggested_jitter: 1e-8 * lmax,
            });
        }
        let s = 1.0 / l.sqrt();
        for c in 0..n {
            out[(k, c)] = s * eig.eigenvectors[(c, k)];
        }
    }
    Ok(out)
}

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky, falling
/// back to a clipped eigendecomposition when Cholesky fails.
pub(crate) fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(lmax > 0.0) || eig.eigenvalues.iter().any(|&l| l < -1e-10 * lmax) {
        return Err(Error::Numerical(format!("{context}: matrix is not positive definite")));
    }
    let floor = 1e-12 * lmax;
    let v = &eig.eigenvectors;
    let mut tmp = v.transpose() * b;
    for k in 0..tmp.nrows() {
        let l = eig.eigenvalues[k].max(floor);
        for c in 0..tmp.ncols() {
            tmp[(k, c)] /= l;
        }
    }
    Ok(v * tmp)
}

/// Moore–Penrose inverse of a symmetric matrix.
pub fn pinv_sym(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().map(|l| l.abs()).fold(0.0f64, f64::max);
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l.abs() <= rtol * lmax {
            continue;
        }
        let col = eig.eigenvectors.column(k);
        out += (col * col.transpose()) / l;
    }
    out
}

/// Singular values (decreasing) and right singular vectors `V` of `a`, so
/// that `a' a = V diag(s²) V'`, by one-sided Jacobi rotations.
///
/// nalgebra's bidiagonal SVD returns wrong factors for some small
/// well-conditioned triangular matrices; Jacobi is slower but reliable at
/// state dimensions.
pub fn right_svd(mut a: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut a, &mut v] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * x - s * y;
                        m[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s = DVector::from_iterator(n, order.iter().map(|&j| norms[j]));
    (s, v.select_columns(&order))
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_factor_reconstructs() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let l = psd_factor(&m);
        assert!((&l * l.transpose() - &m).abs().max() < 1e-12);
        let rank1 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(psd_factor(&rank1).ncols(), 1);
    }

    #[test]
    fn inverse_sqrt_is_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let n = inverse_sqrt_rows(&m, "t").unwrap();
        let inv = n.transpose() * &n;
        assert!((inv * &m - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn pinv_of_singular() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let q = &s * s.transpose();
        let p = pinv_sym(&q, 1e-12);
        assert!((&q * &p * &q - &q).abs().max() < 1e-12);
    }

    fn gram_gap(a: &DMatrix<f64>) -> f64 {
        let (s, v) = right_svd(a.clone());
        let g = v.clone() * DMatrix::from_diagonal(&s.map(|x| x * x)) * v.transpose();
        let orth = (v.tr_mul(&v) - DMatrix::identity(v.ncols(), v.ncols())).abs().max();
        assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        ((a.tr_mul(a) - g).abs().max() / a.norm_squared().max(1.0)).max(orth)
    }

    #[test]
    fn right_svd_handles_triangular_case() {
        // nalgebra 0.35 `svd` reconstructs this with error ~0.06
        let r = DMatrix::from_row_slice(5, 5, &[
            0.9582102093943239, -0.40046978581413994, -0.16670580532376522, -0.21182981936545453, 0.01469440692838771,
            0.0, 1.3118208586012265, 0.1327438665841284, 0.168675045393751, -0.01170080663385702,
            0.0, 0.0, 1.259721685278297, 0.055345024598670634, -0.0038392248803811348,
            0.0, 0.0, 0.0, 1.4976995910634237, -0.00396139514065022,
            0.0, 0.0, 0.0, 0.0, 32.61156116382256,
        ]);
        assert!(gram_gap(&r) < 1e-14);
    }

    #[test]
    fn right_svd_random_and_degenerate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let (m, n) = (rng.random_range(1..12), rng.random_range(1..10));
            let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-3.0..3.0));
            assert!(gram_gap(&a) < 1e-13);
        }
        let rank1 = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let (s, _) = right_svd(rank1);
        assert!((s[0] - 70f64.sqrt()).abs() < 1e-12 && s[1].abs() < 1e-12 && s[2] == 0.0);
        assert_eq!(right_svd(DMatrix::zeros(3, 0)).0.len(), 0);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
