use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;
use crate::hierarchy::SummingMatrix;

/// Covariance added on top of the factor form for a subset of base series.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtraCov {
    Dense(DMatrix<f64>),
    /// `L Σ L'`.
    LowRank { loadings: DMatrix<f64>, cov: DMatrix<f64> },
}

impl ExtraCov {
    fn dim(&self) -> usize {
        match self {
            ExtraCov::Dense(m) => m.nrows(),
            ExtraCov::LowRank { loadings, .. } => loadings.nrows(),
        }
    }

    fn entry(&self, a: usize, b: usize) -> f64 {
        match self {
            ExtraCov::Dense(m) => m[(a, b)],
            ExtraCov::LowRank { loadings, cov } => (loadings.row(a) * cov * loadings.row(b).transpose())[(0, 0)],
        }
    }

    /// `1' M 1` over the listed positions.
    fn quad_positions(&self, pos: &[usize]) -> f64 {
        match self {
            ExtraCov::Dense(m) => pos.iter().map(|&a| pos.iter().map(|&b| m[(a, b)]).sum::<f64>()).sum(),
            ExtraCov::LowRank { loadings, cov } => {
                let mut v = DVector::zeros(loadings.ncols());
                for &a in pos {
                    v += loadings.row(a).transpose();
                }
                v.dot(&(cov * &v))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovBlock {
    /// Base indices, in the order of the block's rows.
    pub rows: Vec<usize>,
    pub cov: ExtraCov,
}

/// Reconciled base forecast: factor-form moments plus block corrections from
/// weight uncertainty. Aggregate moments follow through `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconciledForecast {
    moments: GaussianFactorMoments,
    blocks: Vec<CovBlock>,
    owner: Vec<Option<(usize, usize)>>,
}

impl ReconciledForecast {
    pub fn new(moments: GaussianFactorMoments, blocks: Vec<CovBlock>) -> Result<Self> {
        let n_b = moments.n_b();
        let mut owner = vec![None; n_b];
        for (k, b) in blocks.iter().enumerate() {
            if b.cov.dim() != b.rows.len() {
                return Err(Error::dim("covariance block", b.rows.len(), b.cov.dim()));
            }
            for (p, &i) in b.rows.iter().enumerate() {
                if i >= n_b {
                    return Err(Error::dim("covariance block row", n_b, i));
                }
                if owner[i].replace((k, p)).is_some() {
                    return Err(Error::Numerical("covariance blocks overlap".into()));
                }
            }
        }
        Ok(Self { moments, blocks, owner })
    }

    /// The prior itself, unchanged.
    pub fn from_prior(prior: GaussianFactorMoments) -> Self {
        let n_b = prior.n_b();
        Self {
            moments: prior,
            blocks: Vec::new(),
            owner: vec![None; n_b],
        }
    }

    pub fn n_b(&self) -> usize {
        self.moments.n_b()
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.moments.mean()
    }

    pub fn moments(&self) -> &GaussianFactorMoments {
        &self.moments
    }

    pub fn blocks(&self) -> &[CovBlock] {
        &self.blocks
    }

    pub fn var(&self, i: usize) -> f64 {
        let extra = self.owner[i].map_or(0.0, |(k, p)| self.blocks[k].cov.entry(p, p));
        self.moments.var(i) + extra
    }

    pub fn variances(&self) -> DVector<f64> {
        let mut v = self.moments.variances();
        for b in &self.blocks {
            for (p, &i) in b.rows.iter().enumerate() {
                v[i] += b.cov.entry(p, p);
            }
        }
        v
    }

    /// Variance of the sum of the listed base series.
    pub fn quad_indicator(&self, cols: &[usize]) -> f64 {
        let mut per_block: Vec<Vec<usize>> = vec![Vec::new(); self.blocks.len()];
        for &i in cols {
            if let Some((k, p)) = self.owner[i] {
                per_block[k].push(p);
            }
        }
        let extra: f64 = per_block
            .iter()
            .enumerate()
            .filter(|(_, pos)| !pos.is_empty())
            .map(|(k, pos)| self.blocks[k].cov.quad_positions(pos))
            .sum();
        (self.moments.quad_indicator(cols) + extra).max(0.0)
    }

    /// Means of every series in the hierarchy.
    pub fn full_mean(&self, s: &SummingMatrix) -> Result<Vec<f64>> {
        s.mul_vec(self.mean().as_slice())
    }

    /// Marginal variances of every series in the hierarchy.
    pub fn full_variances(&self, s: &SummingMatrix) -> Result<Vec<f64>> {
        if s.n_b() != self.n_b() {
            return Err(Error::dim("summing matrix columns", self.n_b(), s.n_b()));
        }
        let base = self.variances();
        Ok((0..s.n())
            .map(|r| {
                let row = s.row(r);
                if row.len() == 1 {
                    base[row[0]]
                } else {
                    self.quad_indicator(row)
                }
            })
            .collect())
    }

    /// Dense base covariance, refused above `cap` series.
    pub fn dense_cov(&self, cap: usize) -> Result<DMatrix<f64>> {
        let mut c = self.moments.dense_cov(cap)?;
        for b in &self.blocks {
            for (pa, &a) in b.rows.iter().enumerate() {
                for (pb, &bb) in b.rows.iter().enumerate() {
                    c[(a, bb)] += b.cov.entry(pa, pb);
                }
            }
        }
        Ok(c)
    }

    /// Joins forecasts for disjoint sets of base series. Loadings must refer
    /// to the same factors; cross-part covariance comes from them alone.
    pub fn assemble(n_b: usize, factor_cov: &DMatrix<f64>, parts: Vec<(Vec<usize>, ReconciledForecast)>) -> Result<Self> {
        let n_x = factor_cov.nrows();
        let mut mean = DVector::zeros(n_b);
        let mut loadings = DMatrix::zeros(n_b, n_x);
        let mut specific = DVector::zeros(n_b);
        let mut seen = vec![false; n_b];
        let mut blocks = Vec::new();
        for (rows, part) in parts {
            if rows.len() != part.n_b() {
                return Err(Error::dim("assembled part", rows.len(), part.n_b()));
            }
            if part.moments.n_x() != n_x {
                return Err(Error::dim("assembled part factors", n_x, part.moments.n_x()));
            }
            for (p, &i) in rows.iter().enumerate() {
                if i >= n_b || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Numerical(format!("base series {i} assembled twice or out of range")));
                }
                mean[i] = part.mean()[p];
                loadings.row_mut(i).copy_from(&part.moments.loadings().row(p));
                specific[i] = part.moments.specific()[p];
            }
            for b in part.blocks {
                blocks.push(CovBlock {
                    rows: b.rows.iter().map(|&p| rows[p]).collect(),
                    cov: b.cov,
                });
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Numerical(format!("base series {i} missing from assembled forecast")));
        }
        let moments = GaussianFactorMoments::new(mean, loadings, factor_cov.clone(), specific)?;
        Self::new(moments, blocks)
    }
}
