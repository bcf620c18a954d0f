//! Point and distributional scores, and level × horizon × method tables.
//!
//! The Dawid–Sebastiani score keeps its positive orientation,
//! `−log det Σ − (x−μ)'Σ⁻¹(x−μ)`, so higher is better. With
//! `ls = −log p(x)` for a Gaussian, `dss = n·log(2π) − 2·ls`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rmse(preds: &[f64], actuals: &[f64]) -> Result<f64> {
    if preds.len() != actuals.len() {
        return Err(Error::dim("rmse inputs", preds.len(), actuals.len()));
    }
    if preds.is_empty() {
        return Err(Error::Data("rmse over an empty group".into()));
    }
    let ss: f64 = preds.iter().zip(actuals).map(|(p, a)| (p - a).powi(2)).sum();
    Ok((ss / preds.len() as f64).sqrt())
}

fn check_var(var: f64) -> Result<()> {
    if var > 0.0 && var.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("forecast variance {var} is not positive")))
    }
}

/// Negative log density of `x` under `N(mean, var)`.
pub fn log_score_1d(mean: f64, var: f64, x: f64) -> Result<f64> {
    check_var(var)?;
    Ok(0.5 * (LN_2PI + var.ln() + (x - mean).powi(2) / var))
}

pub fn dss_1d(mean: f64, var: f64, x: f64) -> Result<f64> {
    check_var(var)?;
    Ok(-var.ln() - (x - mean).powi(2) / var)
}

/// `(log det Σ, (x−μ)'Σ⁻¹(x−μ))` through the Woodbury form.
fn factor_terms(m: &GaussianFactorMoments, x: &DVector<f64>) -> Result<(f64, f64)> {
    if x.len() != m.n_b() {
        return Err(Error::dim("scored outcome", m.n_b(), x.len()));
    }
    let solver = m.factorize()?;
    let e = x - m.mean();
    Ok((solver.logdet(), solver.quad_inv(&e)?))
}

/// Negative log density under factor-form moments.
pub fn gaussian_log_score(m: &GaussianFactorMoments, x: &DVector<f64>) -> Result<f64> {
    let (logdet, quad) = factor_terms(m, x)?;
    Ok(0.5 * (m.n_b() as f64 * LN_2PI + logdet + quad))
}

pub fn dss(m: &GaussianFactorMoments, x: &DVector<f64>) -> Result<f64> {
    let (logdet, quad) = factor_terms(m, x)?;
    Ok(-logdet - quad)
}

fn dense_terms(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> Result<(f64, f64)> {
    if x.len() != mean.len() || cov.nrows() != mean.len() {
        return Err(Error::dim("scored outcome", mean.len(), x.len()));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("forecast covariance is not positive definite".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let e = x - mean;
    Ok((logdet, e.dot(&chol.solve(&e))))
}

pub fn log_score_dense(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    let (logdet, quad) = dense_terms(mean, cov, x)?;
    Ok(0.5 * (mean.len() as f64 * LN_2PI + logdet + quad))
}

pub fn dss_dense(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    let (logdet, quad) = dense_terms(mean, cov, x)?;
    Ok(-logdet - quad)
}

/// `n·log(2π) − 2·ls`.
pub fn dss_from_log_score(log_score: f64, n: usize) -> f64 {
    n as f64 * LN_2PI - 2.0 * log_score
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    LogScore,
    Dss,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rmse, Metric::LogScore, Metric::Dss];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::LogScore => "log_score",
            Metric::Dss => "dss",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dss)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub metric: Metric,
    pub level: String,
    pub horizon: usize,
    pub method: String,
    pub value: f64,
    /// Percent of the benchmark, `100·|value|/|benchmark|`.
    pub relative: Option<f64>,
    pub best: bool,
    /// Not meaningful: the score overflowed or a variance was degenerate.
    pub not_meaningful: bool,
}

/// One metric over levels × horizons × methods.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub metric: Metric,
    pub benchmark: Option<String>,
    pub levels: Vec<String>,
    pub horizons: Vec<usize>,
    pub methods: Vec<String>,
    cells: BTreeMap<(usize, usize, usize), ScoreCell>,
}

impl ScoreTable {
    pub fn new(metric: Metric, levels: Vec<String>, horizons: Vec<usize>, methods: Vec<String>) -> Self {
        Self {
            metric,
            benchmark: None,
            levels,
            horizons,
            methods,
            cells: BTreeMap::new(),
        }
    }

    fn key(&self, level: &str, horizon: usize, method: &str) -> Option<(usize, usize, usize)> {
        Some((
            self.levels.iter().position(|l| l == level)?,
            self.horizons.iter().position(|&h| h == horizon)?,
            self.methods.iter().position(|m| m == method)?,
        ))
    }

    pub fn insert(&mut self, level: &str, horizon: usize, method: &str, value: f64, not_meaningful: bool) -> Result<()> {
        let key = self
            .key(level, horizon, method)
            .ok_or_else(|| Error::Data(format!("score cell ({level}, {horizon}, {method}) outside table")))?;
        let cell = ScoreCell {
            metric: self.metric,
            level: level.to_string(),
            horizon,
            method: method.to_string(),
            value,
            relative: None,
            best: false,
            not_meaningful: not_meaningful || !value.is_finite(),
        };
        self.cells.insert(key, cell);
        Ok(())
    }

    pub fn get(&self, level: &str, horizon: usize, method: &str) -> Option<&ScoreCell> {
        self.cells.get(&self.key(level, horizon, method)?)
    }

    pub fn cells(&self) -> impl Iterator<Item = &ScoreCell> {
        self.cells.values()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Mean of the cells for one method and level over horizons.
    pub fn level_mean(&self, level: &str, method: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .horizons
            .iter()
            .filter_map(|&h| self.get(level, h, method))
            .map(|c| c.value)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Tidy CSV: `metric,level,horizon,method,value,relative,best,not_meaningful`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_cells_csv(self.cells(), w)
    }

    /// Aligned text: one block per level, methods down, horizons across.
    /// Relative cells are shown when present; `*` marks the best method and
    /// `N/M` a meaningless score.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let name_w = self.methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(
            out,
            "{}{}",
            self.metric.name(),
            self.benchmark.as_ref().map_or(String::new(), |b| format!(" (% of {b})"))
        );
        for level in &self.levels {
            let _ = write!(out, "\n{level:<name_w$}");
            for h in &self.horizons {
                let _ = write!(out, " {:>11}", format!("h={h}"));
            }
            out.push('\n');
            for method in &self.methods {
                let _ = write!(out, "{method:<name_w$}");
                for &h in &self.horizons {
                    let txt = match self.get(level, h, method) {
                        None => "-".to_string(),
                        Some(c) if c.not_meaningful => "N/M".to_string(),
                        Some(c) => {
                            let v = c.relative.unwrap_or(c.value);
                            format!("{v:.2}{}", if c.best { "*" } else { "" })
                        }
                    };
                    let _ = write!(out, " {txt:>11}");
                }
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CellRecord {
    metric: String,
    level: String,
    horizon: usize,
    method: String,
    value: f64,
    relative: Option<f64>,
    best: bool,
    not_meaningful: bool,
}

pub fn write_cells_csv<'a, W: Write>(cells: impl Iterator<Item = &'a ScoreCell>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for c in cells {
        wtr.serialize(CellRecord {
            metric: c.metric.name().to_string(),
            level: c.level.clone(),
            horizon: c.horizon,
            method: c.method.clone(),
            value: c.value,
            relative: c.relative,
            best: c.best,
            not_meaningful: c.not_meaningful,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses tidy score CSV back into one table per metric. Levels, horizons
/// and methods keep their first-seen order.
pub fn read_tables_csv<R: Read>(r: R) -> Result<Vec<ScoreTable>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut tables: Vec<ScoreTable> = Vec::new();
    let mut rows: Vec<CellRecord> = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    for rec in &rows {
        let metric: Metric = rec.metric.parse()?;
        let t = match tables.iter_mut().position(|t| t.metric == metric) {
            Some(i) => &mut tables[i],
            None => {
                tables.push(ScoreTable::new(metric, Vec::new(), Vec::new(), Vec::new()));
                tables.last_mut().unwrap()
            }
        };
        if !t.levels.contains(&rec.level) {
            t.levels.push(rec.level.clone());
        }
        if !t.horizons.contains(&rec.horizon) {
            t.horizons.push(rec.horizon);
        }
        if !t.methods.contains(&rec.method) {
            t.methods.push(rec.method.clone());
        }
        let key = t.key(&rec.level, rec.horizon, &rec.method).unwrap();
        t.cells.insert(
            key,
            ScoreCell {
                metric,
                level: rec.level.clone(),
                horizon: rec.horizon,
                method: rec.method.clone(),
                value: rec.value,
                relative: rec.relative,
                best: rec.best,
                not_meaningful: rec.not_meaningful,
            },
        );
        if rec.relative == Some(100.0) && t.benchmark.is_none() {
            t.benchmark = Some(rec.method.clone());
        }
    }
    Ok(tables)
}

/// Adds percent-of-benchmark cells and best-per-cell flags.
pub fn report_relative(table: &ScoreTable, benchmark: &str) -> Result<ScoreTable> {
    if table.methods.is_empty() || table.is_empty() {
        return Err(Error::Data("no methods to compare".into()));
    }
    if !table.methods.iter().any(|m| m == benchmark) {
        return Err(Error::Data(format!("benchmark method `{benchmark}` has no scores")));
    }
    let mut out = table.clone();
    out.benchmark = Some(benchmark.to_string());
    for level in &table.levels {
        for &h in &table.horizons {
            let bench = table.get(level, h, benchmark).map(|c| c.value);
            let mut best: Option<(usize, f64)> = None;
            for (mi, method) in table.methods.iter().enumerate() {
                let Some(c) = table.get(level, h, method) else { continue };
                if !c.not_meaningful {
                    let better = match best {
                        None => true,
                        Some((_, b)) if table.metric.higher_is_better() => c.value > b,
                        Some((_, b)) => c.value < b,
                    };
                    if better {
                        best = Some((mi, c.value));
                    }
                }
                let key = out.key(level, h, method).unwrap();
                let cell = out.cells.get_mut(&key).unwrap();
                cell.relative = bench.map(|b| {
                    if method == benchmark {
                        100.0
                    } else if b == 0.0 {
                        if c.value == 0.0 { 100.0 } else { f64::INFINITY }
                    } else {
                        100.0 * c.value.abs() / b.abs()
                    }
                });
                cell.best = false;
            }
            if let Some((mi, _)) = best {
                let key = out.key(level, h, &table.methods[mi]).unwrap();
                out.cells.get_mut(&key).unwrap().best = true;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Default, Clone)]
struct Sums {
    sq_err: f64,
    log_score: f64,
    dss: f64,
    n: usize,
    n_scored: usize,
    degenerate: bool,
}

/// Accumulates marginal scores per (level, horizon, method); level scores
/// are averages over the level's series and all origins.
#[derive(Debug, Clone, Default)]
pub struct ScoreAccumulator {
    sums: BTreeMap<(String, usize, String), Sums>,
    levels: Vec<String>,
    methods: Vec<String>,
    horizons: Vec<usize>,
}

impl ScoreAccumulator {
    pub fn new(levels: Vec<String>) -> Self {
        Self {
            levels,
            ..Default::default()
        }
    }

    /// Adds one forecast–outcome pair. `var` of `None` scores the mean only.
    /// Missing outcomes are ignored.
    pub fn add(&mut self, method: &str, level: &str, horizon: usize, mean: f64, var: Option<f64>, actual: f64) -> Result<()> {
        if !actual.is_finite() {
            return Ok(());
        }
        if !self.levels.iter().any(|l| l == level) {
            self.levels.push(level.to_string());
        }
        if !self.methods.iter().any(|m| m == method) {
            self.methods.push(method.to_string());
        }
        if !self.horizons.contains(&horizon) {
            self.horizons.push(horizon);
            self.horizons.sort_unstable();
        }
        let s = self.sums.entry((level.to_string(), horizon, method.to_string())).or_default();
        s.sq_err += (mean - actual).powi(2);
        s.n += 1;
        if let Some(v) = var {
            match (log_score_1d(mean, v, actual), dss_1d(mean, v, actual)) {
                (Ok(ls), Ok(d)) => {
                    debug_assert!((d - dss_from_log_score(ls, 1)).abs() <= 1e-10 * (1.0 + d.abs()));
                    s.log_score += ls;
                    s.dss += d;
                    s.n_scored += 1;
                }
                _ => s.degenerate = true,
            }
        }
        Ok(())
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn table(&self, metric: Metric) -> Result<ScoreTable> {
        let mut t = ScoreTable::new(metric, self.levels.clone(), self.horizons.clone(), self.methods.clone());
        for ((level, h, method), s) in &self.sums {
            if s.n == 0 {
                continue;
            }
            let (value, nm) = match metric {
                Metric::Rmse => ((s.sq_err / s.n as f64).sqrt(), false),
                Metric::LogScore | Metric::Dss if s.n_scored == 0 => {
                    if !s.degenerate {
                        continue;
                    }
                    (f64::NAN, true)
                }
                Metric::LogScore => (s.log_score / s.n_scored as f64, s.degenerate),
                Metric::Dss => (s.dss / s.n_scored as f64, s.degenerate),
            };
            t.insert(level, *h, method, value, nm)?;
        }
        Ok(t)
    }

    pub fn tables(&self) -> Result<Vec<ScoreTable>> {
        Metric::ALL.into_iter().map(|m| self.table(m)).collect()
    }
}
