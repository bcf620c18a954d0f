//! Square-root forward filtering with `C = U S² U'`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{inverse_sqrt_rows, right_svd, spd_solve, symmetrize};

/// Smallest one-step forecast variance used as a divisor.
pub const Q_FLOOR: f64 = 1e-12;

/// State moments in square-root form. Used both for priors `(a, R)` and
/// posteriors `(m, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdState {
    pub m: DVector<f64>,
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
}

impl SvdState {
    pub fn from_cov(m: DVector<f64>, c: &DMatrix<f64>) -> Result<Self> {
        let q = m.len();
        if c.nrows() != q || c.ncols() != q {
            return Err(Error::dim("state covariance", q, c.nrows()));
        }
        let mut sym = c.clone();
        symmetrize(&mut sym);
        let eig = SymmetricEigen::new(sym);
        let lmax = eig.eigenvalues.iter().map(|l| l.abs()).fold(0.0f64, f64::max);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10 * lmax.max(1e-300)) {
            return Err(Error::Numerical("state covariance is not PSD".into()));
        }
        Ok(Self {
            m,
            u: eig.eigenvectors,
            s: eig.eigenvalues.map(|l| l.max(0.0).sqrt()),
        })
    }

    pub fn diagonal(m: DVector<f64>, var: &DVector<f64>) -> Self {
        let q = m.len();
        Self {
            m,
            u: DMatrix::identity(q, q),
            s: var.map(|v| v.max(0.0).sqrt()),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// `N` with `N' N = C`, i.e. `S U'`.
    pub fn root(&self) -> DMatrix<f64> {
        let mut n = self.u.transpose();
        for (i, mut row) in n.row_iter_mut().enumerate() {
            row *= self.s[i];
        }
        n
    }

    pub fn cov(&self) -> DMatrix<f64> {
        let n = self.root();
        n.tr_mul(&n)
    }

    /// `x' C x`.
    pub fn quad(&self, x: &DVector<f64>) -> f64 {
        let ux = self.u.tr_mul(x);
        ux.iter().zip(self.s.iter()).map(|(v, s)| (v * s).powi(2)).sum()
    }

    /// State moments rebuilt from any square root `N` (`N' N = C`).
    fn from_root(m: DVector<f64>, n: DMatrix<f64>) -> Self {
        let q = m.len();
        let (s, u) = right_svd(compress(n, q));
        Self { m, u, s }
    }
}

/// Upper-triangular `q × q` factor with the same Gram matrix as `n`.
fn compress(n: DMatrix<f64>, q: usize) -> DMatrix<f64> {
    if n.nrows() <= q {
        let mut out = DMatrix::zeros(q, q);
        out.view_mut((0, 0), (n.nrows(), q)).copy_from(&n);
        return out;
    }
    n.qr().r()
}

/// Square root of the discount innovation `W`: for each block with `δ < 1`,
/// `sqrt((1-δ)/δ)` times the block columns of `S_C U_C' G'`, compressed.
pub fn innovation_root(
    state: &SvdState,
    g: &DMatrix<f64>,
    blocks: &[(Range<usize>, f64)],
) -> DMatrix<f64> {
    let q = state.dim();
    let top = state.root() * g.transpose();
    let mut rows: Vec<DMatrix<f64>> = Vec::new();
    for (r, delta) in blocks {
        if *delta >= 1.0 {
            continue;
        }
        let scale = ((1.0 - delta) / delta).sqrt();
        let cols = top.columns(r.start, r.len()) * scale;
        let rb = compress(cols, r.len());
        let mut emb = DMatrix::zeros(rb.nrows(), q);
        emb.view_mut((0, r.start), (rb.nrows(), r.len())).copy_from(&rb);
        rows.push(emb);
    }
    vstack(&rows, q)
}

fn vstack(parts: &[DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let total: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(total, cols);
    let mut r = 0;
    for p in parts {
        out.view_mut((r, 0), (p.nrows(), cols)).copy_from(p);
        r += p.nrows();
    }
    out
}

/// Prior `(a, R)` with `R = G C G' + N_W' N_W` for a given innovation root.
pub fn predict_with_root(state: &SvdState, g: &DMatrix<f64>, nw: &DMatrix<f64>) -> SvdState {
    let q = state.dim();
    let a = g * &state.m;
    let top = state.root() * g.transpose();
    let stacked = vstack(&[top, nw.clone()], q);
    SvdState::from_root(a, stacked)
}

/// Time update with block discounting, `W_b = (1-δ_b)/δ_b (G C G')_b`.
pub fn svd_predict(state: &SvdState, g: &DMatrix<f64>, blocks: &[(Range<usize>, f64)]) -> SvdState {
    let nw = innovation_root(state, g, blocks);
    predict_with_root(state, g, &nw)
}

/// One-step moments and posterior from a measurement update.
#[derive(Debug, Clone)]
pub struct Update {
    pub posterior: SvdState,
    pub f: DVector<f64>,
    pub e: DVector<f64>,
    pub q: DMatrix<f64>,
}

/// Measurement update for `y = F' θ + ε`, `ε ~ N(0, V)`, with `F` of shape
/// `q × p`. The posterior root comes from the SVD of
/// `[N_{V⁻¹} F' U_R ; S_R⁻¹]`.
pub fn svd_update(prior: &SvdState, f: &DMatrix<f64>, y: &DVector<f64>, v: &DMatrix<f64>) -> Result<Update> {
    let q = prior.dim();
    let p = y.len();
    if f.nrows() != q {
        return Err(Error::dim("F rows", q, f.nrows()));
    }
    if f.ncols() != p {
        return Err(Error::dim("F columns", p, f.ncols()));
    }
    if v.nrows() != p || v.ncols() != p {
        return Err(Error::dim("observation covariance", p, v.nrows()));
    }
    let fc = f.tr_mul(&prior.m);
    let e = y - &fc;
    let fu = f.tr_mul(&prior.u);
    let mut fus = fu.clone();
    for (j, mut col) in fus.column_iter_mut().enumerate() {
        col *= prior.s[j] * prior.s[j];
    }
    let mut qm = &fus * fu.transpose() + v;
    symmetrize(&mut qm);
    if p == 1 {
        if !(qm[(0, 0)] > 0.0) {
            return Err(Error::Numerical(format!("forecast variance {} is not positive", qm[(0, 0)])));
        }
        qm[(0, 0)] = qm[(0, 0)].max(Q_FLOOR);
    }
    let qinv_e = spd_solve(&qm, &DMatrix::from_column_slice(p, 1, e.as_slice()), "one-step forecast variance")?;
    // m = a + U S² U' F Q⁻¹ e
    let m = &prior.m + &prior.u * (fus.transpose() * qinv_e.column(0));

    let smax = prior.s.max();
    if !(smax > 0.0) {
        return Ok(Update {
            posterior: SvdState { m, ..prior.clone() },
            f: fc,
            e,
            q: qm,
        });
    }
    let floor = smax * 1e-100;
    let nv = inverse_sqrt_rows(v, "observation covariance")?;
    let mut stacked = DMatrix::zeros(p + q, q);
    stacked.view_mut((0, 0), (p, q)).copy_from(&(nv * &fu));
    for j in 0..q {
        stacked[(p + j, j)] = 1.0 / prior.s[j].max(floor);
    }
    let (d, v) = right_svd(compress(stacked, q));
    let u = &prior.u * v;
    let s = d.map(|d| if d > 0.0 { 1.0 / d } else { 0.0 });
    Ok(Update {
        posterior: SvdState { m, u, s },
        f: fc,
        e,
        q: qm,
    })
}

/// Scalar-observation convenience wrapper; returns `(posterior, e, q)`.
pub fn svd_update_scalar(prior: &SvdState, f: &DVector<f64>, y: f64, v: f64) -> Result<(SvdState, f64, f64)> {
    if !(v > 0.0) {
        return Err(Error::Numerical(format!("observation variance {v} must be > 0")));
    }
    let up = svd_update(
        prior,
        &DMatrix::from_column_slice(f.len(), 1, f.as_slice()),
        &DVector::from_element(1, y),
        &DMatrix::from_element(1, 1, v),
    )?;
    Ok((up.posterior, up.e[0], up.q[(0, 0)]))
}
