//! Initial priors from an in-sample window.
//!
//! The level is the window mean, seasonal states carry the per-phase mean
//! deviations (projected on the harmonics) and state variances are the sample
//! variance over ten. With a regression block the level and coefficients come
//! from a least-squares fit over the window with a unit-information prior
//! covariance `s n (X'X)⁻¹`; too short a window falls back to zero
//! coefficients with standard deviation `sd(y)/sd(x)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::spec::{Component, DlmSpec};
use super::svd::SvdState;
use super::variance::VarianceState;

/// Window statistics that ignore NaN entries.
fn mean_var(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (0.0, 0.0, 0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var, v.len())
}

/// Floor that keeps a variance positive and scale-aware.
pub(crate) fn variance_floor(level: f64) -> f64 {
    1e-6 * (1.0 + level.abs())
}

/// Initial `(state, variance)` for the state one step before `y[0]`.
///
/// `regressors[t]` holds the regression inputs at time `t` (may be empty when
/// the spec has no regression block).
pub fn initial_state(spec: &DlmSpec, y: &[f64], regressors: &[Vec<f64>]) -> (SvdState, VarianceState) {
    let k = spec.regression_width();
    let has_level = spec
        .blocks
        .iter()
        .any(|b| matches!(b.component, Component::Level | Component::Trend));
    let fit = if k > 0 { least_squares(y, regressors, k, has_level) } else { None };
    let adjusted: Vec<f64> = match &fit {
        Some(f) => y
            .iter()
            .enumerate()
            .map(|(t, v)| v - regressors.get(t).map_or(0.0, |x| x.iter().zip(&f.beta).map(|(a, b)| a * b).sum()))
            .collect(),
        None => y.to_vec(),
    };
    let y = &adjusted[..];
    let (level, var_y, _) = mean_var(y.iter().cloned());
    let s0 = var_y.max(variance_floor(level));
    let q = spec.state_dim();
    let mut m = DVector::zeros(q);
    let mut v = DVector::from_element(q, s0 / 10.0);
    let mut off = 0;
    for b in &spec.blocks {
        let d = b.component.dim();
        match b.component {
            Component::Level => m[off] = level,
            Component::Trend => m[off] = level,
            Component::Seasonal { period, harmonics } => {
                let dev: Vec<f64> = (0..period)
                    .map(|k| {
                        let (mk, _, cnt) = mean_var(y.iter().skip(k).step_by(period).cloned());
                        if cnt > 0 {
                            mk - level
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let h = harmonics.unwrap_or(period / 2);
                let mut o = off;
                for j in 1..=h {
                    let w = 2.0 * PI * j as f64 / period as f64;
                    if 2 * j == period {
                        let c: f64 = dev
                            .iter()
                            .enumerate()
                            .map(|(k, d)| if k % 2 == 0 { *d } else { -*d })
                            .sum::<f64>()
                            / period as f64;
                        // state before y[0] is G⁻¹ θ_0 with G = -1
                        m[o] = -c;
                        o += 1;
                    } else {
                        let scale = 2.0 / period as f64;
                        let a: f64 = dev.iter().enumerate().map(|(k, d)| d * (w * k as f64).cos()).sum::<f64>() * scale;
                        let bb: f64 = dev.iter().enumerate().map(|(k, d)| d * (w * k as f64).sin()).sum::<f64>() * scale;
                        // θ_0 = (a, b); step back with the transposed rotation
                        let (s, c) = w.sin_cos();
                        m[o] = c * a - s * bb;
                        m[o + 1] = s * a + c * bb;
                        o += 2;
                    }
                }
            }
            Component::Regression { .. } if fit.is_some() => {
                let f = fit.as_ref().unwrap();
                for i in 0..k {
                    m[off + i] = f.beta[i];
                }
            }
            Component::Regression { k } => {
                let sd_y = var_y.sqrt().max(variance_floor(level).sqrt());
                for i in 0..k {
                    let (_, var_x, _) = mean_var(regressors.iter().filter_map(|r| r.get(i).cloned()));
                    let ratio = if var_x > 0.0 { sd_y / var_x.sqrt() } else { 1.0 };
                    v[off + i] = ratio * ratio;
                }
            }
        }
        off += d;
    }
    let state = match fit {
        Some(f) => {
            // joint prior for the intercept (level) and coefficients
            let mut idx = Vec::new();
            let mut off = 0;
            for b in &spec.blocks {
                match b.component {
                    Component::Level | Component::Trend if idx.is_empty() && has_level => idx.push(off),
                    Component::Regression { k } => idx.extend(off..off + k),
                    _ => {}
                }
                off += b.component.dim();
            }
            let mut c = DMatrix::from_diagonal(&v);
            let scale = s0 * f.rows as f64;
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    c[(ia, ib)] = scale * f.xtx_inv[(a, b)];
                }
            }
            SvdState::from_cov(m.clone(), &c).unwrap_or_else(|_| SvdState::diagonal(m, &v))
        }
        None => SvdState::diagonal(m, &v),
    };
    (state, VarianceState { n: 1.0, d: s0 })
}

struct LeastSquares {
    beta: Vec<f64>,
    /// `(X'X)⁻¹` over `[1, x]` (or `x` alone without an intercept).
    xtx_inv: DMatrix<f64>,
    rows: usize,
}

fn least_squares(y: &[f64], regressors: &[Vec<f64>], k: usize, intercept: bool) -> Option<LeastSquares> {
    let p = k + usize::from(intercept);
    let rows: Vec<(f64, &Vec<f64>)> = y
        .iter()
        .zip(regressors)
        .filter(|(v, x)| v.is_finite() && x.len() == k && x.iter().all(|a| a.is_finite()))
        .map(|(v, x)| (*v, x))
        .collect();
    if rows.len() < p + 2 {
        return None;
    }
    let x = DMatrix::from_fn(rows.len(), p, |t, j| match (intercept, j) {
        (true, 0) => 1.0,
        (true, j) => rows[t].1[j - 1],
        (false, j) => rows[t].1[j],
    });
    let yv = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.0));
    let mut xtx = x.tr_mul(&x);
    let ridge = 1e-8 * xtx.trace() / p as f64;
    for j in 0..p {
        xtx[(j, j)] += ridge;
    }
    let xtx_inv = xtx.try_inverse()?;
    let coef = &xtx_inv * x.tr_mul(&yv);
    if coef.iter().any(|c| !c.is_finite()) {
        return None;
    }
    let beta = coef.iter().skip(usize::from(intercept)).cloned().collect();
    Some(LeastSquares {
        beta,
        xtx_inv,
        rows: rows.len(),
    })
}
