//! Forecasting methods behind one interface, created by name.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::baselines::{bottom_up, mint, shrink_cov, BuMode, MintMode};
use crate::disagg::ExoForecast;
use crate::error::{Error, Result};
use crate::factor::{GaussianFactorMoments, DEFAULT_DENSE_CAP};
use crate::hierarchy::Hierarchy;
use crate::pipeline::{Mode, Reconciler, ReconcilerConfig};

/// Marginal means and variances of every series at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalForecast {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A sequential forecaster driven one row at a time.
pub trait Method: Send {
    fn name(&self) -> &str;

    /// Absorbs row `t` of the data, then forecasts horizons `1..=h` from the
    /// exogenous forecasts issued at `t`.
    fn step(&mut self, t: usize, y: &[f64], exo: &[ExoForecast]) -> Result<Vec<MarginalForecast>>;
}

/// Everything a method may use when it is built.
pub struct MethodContext<'a> {
    pub hierarchy: &'a Hierarchy,
    pub config: &'a ReconcilerConfig,
    /// Rows available for setting priors.
    pub init_data: &'a [Vec<f64>],
    pub horizons: usize,
    /// Residual rows kept for covariance estimates.
    pub residual_window: usize,
}

type Factory = Box<dyn Fn(&MethodContext) -> Result<Box<dyn Method>> + Send + Sync>;

/// Name → constructor.
pub struct MethodRegistry {
    factories: BTreeMap<String, Factory>,
}

pub const BUILTIN_METHODS: [&str; 9] = [
    "bu-diag",
    "bu-shrink",
    "mint-ols",
    "mint-wls",
    "mint-shrink",
    "mrdlm",
    "dhf",
    "dhf-2step",
    "dhf-hier",
];

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("bu-diag", |c| Ok(Box::new(BottomUp::new("bu-diag", false, c))));
        r.register("bu-shrink", |c| Ok(Box::new(BottomUp::new("bu-shrink", true, c))));
        r.register("mint-ols", |c| Ok(Box::new(Mint::new("mint-ols", WKind::Ols, c))));
        r.register("mint-wls", |c| Ok(Box::new(Mint::new("mint-wls", WKind::Wls, c))));
        r.register("mint-shrink", |c| Ok(Box::new(Mint::new("mint-shrink", WKind::Shrink, c))));
        for name in ["mrdlm", "dhf", "dhf-hier", "dhf-2step"] {
            r.register(name, move |c| Dynamic::boxed(name, c));
        }
        r
    }
}

impl MethodRegistry {
    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&MethodContext) -> Result<Box<dyn Method>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(f));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(|s| s.as_str()).collect()
    }

    pub fn create(&self, name: &str, ctx: &MethodContext) -> Result<Box<dyn Method>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!("unknown method `{name}`; known: {}", self.names().join(", ")))
        })?;
        f(ctx)
    }

    pub fn create_all(&self, names: &[String], ctx: &MethodContext) -> Result<Vec<Box<dyn Method>>> {
        names.iter().map(|n| self.create(n, ctx)).collect()
    }
}

/// Reconciler mode and combination pooling behind a dynamic method name.
pub fn dynamic_mode(name: &str) -> Option<(Mode, Option<bool>)> {
    match name {
        "mrdlm" => Some((Mode::Prior, None)),
        "dhf" => Some((Mode::OneStep, Some(false))),
        "dhf-hier" => Some((Mode::OneStep, Some(true))),
        "dhf-2step" => Some((Mode::TwoStep, None)),
        _ => None,
    }
}

/// A reconciler set up as the dynamic method `name`.
pub fn dynamic_reconciler(name: &str, h: &Hierarchy, cfg: &ReconcilerConfig, init_data: &[Vec<f64>]) -> Result<Reconciler> {
    let (mode, pooled) = dynamic_mode(name).ok_or_else(|| {
        Error::Config(format!("`{name}` is not a dynamic method; use mrdlm, dhf, dhf-hier or dhf-2step"))
    })?;
    let mut cfg = cfg.clone();
    if let Some(p) = pooled {
        cfg.combination.pooled = p;
    }
    Reconciler::new(h, &cfg, mode, init_data)
}

/// The prior model, alone or with dynamic reconciliation.
pub struct Dynamic {
    name: String,
    rec: Reconciler,
}

impl Dynamic {
    fn boxed(name: &str, ctx: &MethodContext) -> Result<Box<dyn Method>> {
        let mut cfg = ctx.config.clone();
        cfg.horizons = ctx.horizons;
        let rec = dynamic_reconciler(name, ctx.hierarchy, &cfg, ctx.init_data)?;
        Ok(Box::new(Self {
            name: name.to_string(),
            rec,
        }))
    }

    pub fn reconciler(&self) -> &Reconciler {
        &self.rec
    }
}

impl Method for Dynamic {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, _t: usize, y: &[f64], exo: &[ExoForecast]) -> Result<Vec<MarginalForecast>> {
        let out = self.rec.step(y, exo)?;
        (1..=out.horizons())
            .map(|j| {
                let (mean, var) = out.full_moments(self.rec.hierarchy(), j)?;
                Ok(MarginalForecast { mean, var })
            })
            .collect()
    }
}

/// Exogenous forecasts issued at recent origins, and the residuals of the
/// matured ones per horizon.
struct ResidualBook {
    horizons: usize,
    window: usize,
    /// Series the residuals cover.
    rows: Vec<usize>,
    issued: VecDeque<(usize, Vec<Vec<Option<ExoForecast>>>)>,
    residuals: Vec<VecDeque<Vec<f64>>>,
}

impl ResidualBook {
    fn new(rows: Vec<usize>, horizons: usize, window: usize) -> Self {
        Self {
            horizons,
            window: window.max(2),
            rows,
            issued: VecDeque::new(),
            residuals: vec![VecDeque::new(); horizons],
        }
    }

    /// Records residuals of forecasts targeting row `t`, then files `exo`.
    fn advance(&mut self, t: usize, y: &[f64], exo: &[ExoForecast], n: usize) {
        for (origin, by_h) in &self.issued {
            let j = t - origin;
            if j == 0 || j > self.horizons {
                continue;
            }
            let fc = &by_h[j - 1];
            let res: Option<Vec<f64>> = self
                .rows
                .iter()
                .map(|&r| fc[r].filter(|_| y[r].is_finite()).map(|f| y[r] - f.mean))
                .collect();
            if let Some(res) = res {
                let buf = &mut self.residuals[j - 1];
                buf.push_back(res);
                if buf.len() > self.window {
                    buf.pop_front();
                }
            }
        }
        while self.issued.front().is_some_and(|(o, _)| t >= o + self.horizons) {
            self.issued.pop_front();
        }
        let mut by_h = vec![vec![None; n]; self.horizons];
        for e in exo {
            if e.horizon >= 1 && e.horizon <= self.horizons && e.series < n {
                by_h[e.horizon - 1][e.series] = Some(*e);
            }
        }
        self.issued.push_back((t, by_h));
    }

    fn matrix(&self, j: usize) -> Option<DMatrix<f64>> {
        let buf = &self.residuals[j - 1];
        if buf.len() < 2 {
            return None;
        }
        let n = self.rows.len();
        Some(DMatrix::from_fn(buf.len(), n, |r, c| buf[r][c]))
    }

    fn variance(&self, j: usize, c: usize) -> Option<f64> {
        let buf = &self.residuals[j - 1];
        if buf.len() < 2 {
            return None;
        }
        let m = buf.iter().map(|r| r[c]).sum::<f64>() / buf.len() as f64;
        Some(buf.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / (buf.len() - 1) as f64)
    }

    fn latest(&self) -> Option<&Vec<Vec<Option<ExoForecast>>>> {
        self.issued.back().map(|(_, v)| v)
    }
}

impl MarginalForecast {
    /// Placeholder for a horizon the inputs do not cover.
    fn unavailable(n: usize) -> Self {
        Self {
            mean: vec![f64::NAN; n],
            var: vec![f64::NAN; n],
        }
    }
}

/// Bottom-up aggregation of the base exogenous forecasts. Horizons missing a
/// base forecast come out as `NaN`.
pub struct BottomUp {
    name: String,
    shrink: bool,
    h: Hierarchy,
    book: ResidualBook,
}

impl BottomUp {
    fn new(name: &str, shrink: bool, ctx: &MethodContext) -> Self {
        let h = ctx.hierarchy.clone();
        let rows = (h.n_a()..h.n()).collect();
        Self {
            name: name.to_string(),
            shrink,
            book: ResidualBook::new(rows, ctx.horizons, ctx.residual_window),
            h,
        }
    }
}

impl Method for BottomUp {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, t: usize, y: &[f64], exo: &[ExoForecast]) -> Result<Vec<MarginalForecast>> {
        let (n, n_a, n_b) = (self.h.n(), self.h.n_a(), self.h.n_b());
        self.book.advance(t, y, exo, n);
        if exo.is_empty() {
            return Ok(Vec::new());
        }
        let latest = self.book.latest().expect("just filed");
        let mut out = Vec::with_capacity(self.book.horizons);
        for j in 1..=self.book.horizons {
            let fc = &latest[j - 1];
            if fc[n_a..].iter().any(|f| f.is_none()) {
                out.push(MarginalForecast::unavailable(n));
                continue;
            }
            let mut mean = DVector::zeros(n_b);
            let mut var = DVector::zeros(n_b);
            for i in 0..n_b {
                let f = fc[n_a + i].expect("checked");
                mean[i] = f.mean;
                var[i] = f.var.or_else(|| self.book.variance(j, i)).unwrap_or(f64::NAN);
            }
            let mode = match (self.shrink, self.book.matrix(j)) {
                (true, Some(res)) if res.nrows() >= 3 => BuMode::Shrink(res),
                _ => BuMode::Diag,
            };
            let moments = bottom_up(&mean, &var.map(|v| if v.is_finite() { v } else { 0.0 }), &mode)?;
            let proj = moments.project(self.h.summing())?;
            let mut fv: Vec<f64> = proj.variances().iter().copied().collect();
            if var.iter().any(|v| !v.is_finite()) {
                fv.iter_mut().for_each(|v| *v = f64::NAN);
            }
            out.push(MarginalForecast {
                mean: proj.mean().iter().copied().collect(),
                var: fv,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WKind {
    Ols,
    Wls,
    Shrink,
}

/// MinT on the full vector of exogenous forecasts, with `W` from in-sample
/// residuals of those forecasts. `G` comes from the first complete horizon.
pub struct Mint {
    name: String,
    kind: WKind,
    h: Hierarchy,
    book: ResidualBook,
}

impl Mint {
    fn new(name: &str, kind: WKind, ctx: &MethodContext) -> Self {
        let h = ctx.hierarchy.clone();
        Self {
            name: name.to_string(),
            kind,
            book: ResidualBook::new((0..h.n()).collect(), ctx.horizons, ctx.residual_window),
            h,
        }
    }

    /// Forecast-error covariance for horizon `j`, dense or factor form.
    fn w(&self, j: usize, exo_var: &DVector<f64>) -> Result<WForm> {
        let n = self.h.n();
        let res = self.book.matrix(j);
        Ok(match self.kind {
            WKind::Ols => WForm::Diag(DVector::from_element(n, 1.0)),
            WKind::Wls => match &res {
                Some(_) => WForm::Diag(DVector::from_fn(n, |i, _| self.book.variance(j, i).unwrap_or(0.0))),
                None => WForm::Diag(exo_var.clone()),
            },
            WKind::Shrink => match res {
                Some(r) if r.nrows() >= 3 => WForm::Factor(shrink_cov(&r)?.moments(DVector::zeros(n))?),
                _ => WForm::Diag(exo_var.clone()),
            },
        })
    }
}

enum WForm {
    Diag(DVector<f64>),
    Factor(GaussianFactorMoments),
}

impl WForm {
    fn mode(&self) -> MintMode {
        match self {
            WForm::Diag(v) => MintMode::Wls(v.clone()),
            WForm::Factor(_) => unreachable!("factor W is passed densely"),
        }
    }

    /// Diagonal of `A W A'`.
    fn quad_rows(&self, a: &DMatrix<f64>) -> Vec<f64> {
        match self {
            WForm::Diag(v) => (0..a.nrows()).map(|r| a.row(r).iter().zip(v.iter()).map(|(x, w)| x * x * w).sum()).collect(),
            WForm::Factor(m) => {
                let al = a * m.loadings();
                let sig = m.factor_cov();
                (0..a.nrows())
                    .map(|r| {
                        let row = al.row(r);
                        let common = (row * sig * row.transpose())[(0, 0)];
                        common + a.row(r).iter().zip(m.specific().iter()).map(|(x, d)| x * x * d).sum::<f64>()
                    })
                    .collect()
            }
        }
    }
}

impl Method for Mint {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, t: usize, y: &[f64], exo: &[ExoForecast]) -> Result<Vec<MarginalForecast>> {
        let n = self.h.n();
        self.book.advance(t, y, exo, n);
        if exo.is_empty() {
            return Ok(Vec::new());
        }
        let latest = self.book.latest().expect("just filed").clone();
        let s = self.h.summing();
        let cap = DEFAULT_DENSE_CAP;
        let mut out = Vec::with_capacity(self.book.horizons);
        let mut g: Option<DMatrix<f64>> = None;
        for j in 1..=self.book.horizons {
            let fc = &latest[j - 1];
            if fc.iter().any(|f| f.is_none()) {
                out.push(MarginalForecast::unavailable(n));
                continue;
            }
            let mut y_hat = DVector::zeros(n);
            let mut exo_var = DVector::zeros(n);
            for i in 0..n {
                let f = fc[i].expect("checked");
                y_hat[i] = f.mean;
                exo_var[i] = f.var.unwrap_or(1.0);
            }
            let w = self.w(j, &exo_var)?;
            if g.is_none() {
                let mode = match &w {
                    WForm::Diag(v) if v.iter().all(|x| *x > 0.0) => w.mode(),
                    WForm::Diag(_) => MintMode::Ols,
                    WForm::Factor(m) => MintMode::Dense(m.dense_cov(cap)?),
                };
                g = Some(mint(&y_hat, s, &mode, cap)?.g);
            }
            let g = g.as_ref().expect("set above");
            let base = g * &y_hat;
            let a = s.mul_mat(g)?;
            out.push(MarginalForecast {
                mean: s.mul_vec(base.as_slice())?,
                var: w.quad_rows(&a),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::fixtures;

    #[test]
    fn registry_knows_every_method() {
        let r = MethodRegistry::default();
        let mut names: Vec<&str> = BUILTIN_METHODS.to_vec();
        names.sort_unstable();
        assert_eq!(r.names(), names);
        let h = fixtures::two_base();
        let data: Vec<Vec<f64>> = (0..30).map(|t| vec![3.0 + (t % 3) as f64, 1.0, 2.0 + (t % 3) as f64]).collect();
        let cfg = ReconcilerConfig::default();
        let ctx = MethodContext {
            hierarchy: &h,
            config: &cfg,
            init_data: &data,
            horizons: 2,
            residual_window: 10,
        };
        for n in BUILTIN_METHODS {
            assert_eq!(r.create(n, &ctx).unwrap().name(), n);
        }
        assert!(matches!(r.create("nope", &ctx), Err(Error::Config(_))));
    }
}
