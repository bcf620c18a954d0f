use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A structural block of a DLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Component {
    Level,
    /// Level plus slope.
    Trend,
    /// Trigonometric seasonal with `harmonics` harmonics; `None` means all
    /// `period / 2` of them.
    Seasonal { period: usize, harmonics: Option<usize> },
    Regression { k: usize },
}

impl Component {
    fn harmonic_count(period: usize, harmonics: Option<usize>) -> usize {
        harmonics.unwrap_or(period / 2)
    }

    /// Number of states the block contributes.
    pub fn dim(&self) -> usize {
        match *self {
            Component::Level => 1,
            Component::Trend => 2,
            Component::Seasonal { period, harmonics } => {
                let h = Self::harmonic_count(period, harmonics);
                if period % 2 == 0 && h == period / 2 {
                    2 * h - 1
                } else {
                    2 * h
                }
            }
            Component::Regression { k } => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub component: Component,
    pub discount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsVariance {
    Learned,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DlmSpec {
    pub blocks: Vec<Block>,
    pub variance_discount: f64,
    pub obs_variance: ObsVariance,
}

impl DlmSpec {
    pub fn new(blocks: Vec<Block>, variance_discount: f64, obs_variance: ObsVariance) -> Result<Self> {
        let spec = Self {
            blocks,
            variance_discount,
            obs_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn local_level(discount: f64, obs_variance: ObsVariance) -> Result<Self> {
        Self::new(
            vec![Block {
                component: Component::Level,
                discount,
            }],
            1.0,
            obs_variance,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("DLM needs at least one block".into()));
        }
        let disc_ok = |d: f64| d > 0.0 && d <= 1.0;
        if !disc_ok(self.variance_discount) {
            return Err(Error::Config(format!(
                "variance discount {} outside (0, 1]",
                self.variance_discount
            )));
        }
        let mut n_reg = 0;
        for b in &self.blocks {
            if !disc_ok(b.discount) {
                return Err(Error::Config(format!("block discount {} outside (0, 1]", b.discount)));
            }
            match b.component {
                Component::Seasonal { period, harmonics } => {
                    if period < 2 {
                        return Err(Error::Config(format!("seasonal period {period} < 2")));
                    }
                    let h = Component::harmonic_count(period, harmonics);
                    if h == 0 || h > period / 2 {
                        return Err(Error::Config(format!(
                            "{h} harmonics invalid for period {period}"
                        )));
                    }
                }
                Component::Regression { k } => {
                    if k == 0 {
                        return Err(Error::Config("regression block with k = 0".into()));
                    }
                    n_reg += 1;
                }
                _ => {}
            }
        }
        if n_reg > 1 {
            return Err(Error::Config("at most one regression block is supported".into()));
        }
        if let ObsVariance::Fixed(v) = self.obs_variance {
            if !(v > 0.0) {
                return Err(Error::Config(format!("fixed observation variance {v} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.component.dim()).sum()
    }

    pub fn regression_width(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b.component {
                Component::Regression { k } => k,
                _ => 0,
            })
            .sum()
    }

    /// Time-invariant parts of the model.
    pub fn design(&self) -> Design {
        Design::single(self)
    }
}

/// `G`, the fixed part of `F`, and the state ranges of each discount block.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub g: DMatrix<f64>,
    /// `F` with zeros in regression slots; one column per observed series.
    pub f: DMatrix<f64>,
    pub blocks: Vec<(Range<usize>, f64)>,
    /// Regression state range and the observation column it feeds.
    pub regression: Vec<(Range<usize>, usize)>,
}

impl Design {
    fn single(spec: &DlmSpec) -> Self {
        Self::replicated(spec, 1)
    }

    /// One copy of `spec` per observed series, stacked block-diagonally.
    pub fn replicated(spec: &DlmSpec, copies: usize) -> Self {
        let q1 = spec.state_dim();
        let q = q1 * copies;
        let mut g = DMatrix::zeros(q, q);
        let mut f = DMatrix::zeros(q, copies);
        let mut blocks = Vec::new();
        let mut regression = Vec::new();
        for c in 0..copies {
            let mut off = c * q1;
            for b in &spec.blocks {
                let d = b.component.dim();
                let r = off..off + d;
                match b.component {
                    Component::Level => {
                        g[(off, off)] = 1.0;
                        f[(off, c)] = 1.0;
                    }
                    Component::Trend => {
                        g[(off, off)] = 1.0;
                        g[(off, off + 1)] = 1.0;
                        g[(off + 1, off + 1)] = 1.0;
                        f[(off, c)] = 1.0;
                    }
                    Component::Seasonal { period, harmonics } => {
                        let h = Component::harmonic_count(period, harmonics);
                        let mut o = off;
                        for j in 1..=h {
                            if 2 * j == period {
                                g[(o, o)] = -1.0;
                                f[(o, c)] = 1.0;
                                o += 1;
                            } else {
                                let w = 2.0 * PI * j as f64 / period as f64;
                                let (s, co) = w.sin_cos();
                                g[(o, o)] = co;
                                g[(o, o + 1)] = s;
                                g[(o + 1, o)] = -s;
                                g[(o + 1, o + 1)] = co;
                                f[(o, c)] = 1.0;
                                o += 2;
                            }
                        }
                    }
                    Component::Regression { .. } => {
                        for i in r.clone() {
                            g[(i, i)] = 1.0;
                        }
                        regression.push((r.clone(), c));
                    }
                }
                blocks.push((r, b.discount));
                off += d;
            }
        }
        Self {
            g,
            f,
            blocks,
            regression,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.g.nrows()
    }

    /// `F_t` with `regressors` written into the regression slots of every
    /// observation column.
    pub fn f_with(&self, regressors: &[f64]) -> Result<DMatrix<f64>> {
        let mut f = self.f.clone();
        for (r, c) in &self.regression {
            if regressors.len() != r.len() {
                return Err(Error::dim("regressors", r.len(), regressors.len()));
            }
            for (i, &x) in r.clone().zip(regressors) {
                f[(i, *c)] = x;
            }
        }
        if self.regression.is_empty() && !regressors.is_empty() {
            return Err(Error::dim("regressors", 0, regressors.len()));
        }
        Ok(f)
    }

    /// Univariate `F_t` as a vector.
    pub fn f_vec(&self, regressors: &[f64]) -> Result<DVector<f64>> {
        Ok(self.f_with(regressors)?.column(0).into_owned())
    }
}

/// `(F_t, G_t)` for a univariate spec.
pub fn build_design(spec: &DlmSpec, regressors: Option<&[f64]>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = spec.design();
    let k = spec.regression_width();
    let x = match (k, regressors) {
        (0, None) => &[][..],
        (0, Some(x)) if x.is_empty() => x,
        (0, Some(x)) => return Err(Error::dim("regressors", 0, x.len())),
        (_, None) => return Err(Error::Data("regression block needs regressor values".into())),
        (_, Some(x)) => x,
    };
    Ok((d.f_vec(x)?, d.g))
}
