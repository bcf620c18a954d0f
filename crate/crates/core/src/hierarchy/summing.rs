use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sparse 0/1 summing matrix `S` (n × n_b).
///
/// Rows `0..n_a` are the aggregation rows `C`, rows `n_a..n` are the identity
/// on the base series. Each row stores the sorted base columns it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct SummingMatrix {
    n_b: usize,
    rows: Vec<Vec<usize>>,
}

impl SummingMatrix {
    /// Builds `S` from aggregate rows. The identity block is appended.
    pub fn from_aggregate_rows(n_b: usize, aggregate_rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut rows = Vec::with_capacity(aggregate_rows.len() + n_b);
        for mut r in aggregate_rows {
            r.sort_unstable();
            r.dedup();
            if let Some(&c) = r.last() {
                if c >= n_b {
                    return Err(Error::dim("summing matrix column", n_b, c + 1));
                }
            }
            rows.push(r);
        }
        rows.extend((0..n_b).map(|j| vec![j]));
        Ok(Self { n_b, rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn n_a(&self) -> usize {
        self.rows.len() - self.n_b
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    /// Base columns with a one in row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    /// Row `i` as a dense length-n_b vector.
    pub fn row_dense(&self, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_b);
        for &j in &self.rows[i] {
            v[j] = 1.0;
        }
        v
    }

    /// `S b`.
    pub fn mul_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n_b {
            return Err(Error::dim("S·b", self.n_b, b.len()));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| r.iter().map(|&j| b[j]).sum())
            .collect())
    }

    /// `S M` for a dense n_b × r matrix.
    pub fn mul_mat(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.n_b {
            return Err(Error::dim("S·M", self.n_b, m.nrows()));
        }
        let mut out = DMatrix::zeros(self.n(), m.ncols());
        for (i, r) in self.rows.iter().enumerate() {
            for &j in r {
                for c in 0..m.ncols() {
                    out[(i, c)] += m[(j, c)];
                }
            }
        }
        Ok(out)
    }

    /// `S' y`.
    pub fn transpose_mul_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n() {
            return Err(Error::dim("S'·y", self.n(), y.len()));
        }
        let mut out = vec![0.0; self.n_b];
        for (r, &yi) in self.rows.iter().zip(y) {
            for &j in r {
                out[j] += yi;
            }
        }
        Ok(out)
    }

    /// Dense `S`, refused when `n` exceeds `cap`.
    pub fn to_dense(&self, cap: usize) -> Result<DMatrix<f64>> {
        if self.n() > cap {
            return Err(Error::DenseCap { n: self.n(), cap });
        }
        let mut s = DMatrix::zeros(self.n(), self.n_b);
        for (i, r) in self.rows.iter().enumerate() {
            for &j in r {
                s[(i, j)] = 1.0;
            }
        }
        Ok(s)
    }

    /// Sub-matrix made of the listed rows (still indexed by all base columns).
    pub fn select_rows(&self, rows: &[usize]) -> Vec<&[usize]> {
        rows.iter().map(|&i| self.rows[i].as_slice()).collect()
    }

    /// True when the listed rows cover pairwise-disjoint base sets.
    pub fn rows_disjoint(&self, rows: &[usize]) -> bool {
        let mut seen = vec![false; self.n_b];
        for &i in rows {
            for &j in &self.rows[i] {
                if seen[j] {
                    return false;
                }
                seen[j] = true;
            }
        }
        true
    }
}
