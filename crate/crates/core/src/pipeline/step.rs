use std::collections::HashMap;

use rayon::prelude::*;

use super::ReconcilerConfig;
use crate::combination::{Combiner, ReconciledForecast};
use crate::disagg::{build_regressors, ExoForecast, RegressorPanel};
use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;
use crate::hierarchy::{ForecastAssignment, Hierarchy, Side, SubHierarchyPartition};
use crate::mrdlm::Mrdlm;

/// How forecasts are produced from the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// The prior model alone; exogenous forecasts are ignored.
    Prior,
    OneStep,
    TwoStep,
}

/// Horizon-1 inputs kept from the previous origin for the next combination
/// update.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Pending {
    pub(crate) prior: GaussianFactorMoments,
    pub(crate) panel: RegressorPanel,
    pub(crate) upper: Option<(GaussianFactorMoments, RegressorPanel)>,
}

#[derive(Debug, Clone)]
pub(crate) struct TwoStepState {
    pub(crate) partition: SubHierarchyPartition,
    pub(crate) sides: ForecastAssignment,
    upper_index: HashMap<usize, usize>,
    pub(crate) lower_rows: Vec<Vec<usize>>,
    /// The boundary is the base level: the upper step is the whole job.
    degenerate: bool,
    pub(crate) upper: Option<Combiner>,
    pub(crate) lowers: Vec<Combiner>,
}

impl TwoStepState {
    pub(crate) fn new(h: &Hierarchy, cfg: &ReconcilerConfig) -> Result<Self> {
        let boundary = cfg.boundary_level(h)?;
        let partition = h.partition(&boundary)?;
        let mut sides = partition.forecast_assignment.clone();
        for (level, side) in &cfg.two_step.assignment {
            sides.assign(level, *side)?;
        }
        let upper_index = partition.upper_map.iter().enumerate().map(|(u, &o)| (o, u)).collect();
        let lower_rows = (0..partition.lowers.len()).map(|k| partition.lower_base(k)).collect();
        let degenerate = partition.boundary.iter().all(|&b| h.is_base(b));
        Ok(Self {
            partition,
            sides,
            upper_index,
            lower_rows,
            degenerate,
            upper: None,
            lowers: Vec::new(),
        })
    }
}

/// Reconciled forecasts made at one origin.
#[derive(Debug, Clone, PartialEq)]
pub struct StepForecasts {
    /// Number of observations absorbed before forecasting.
    pub origin: usize,
    /// Prior base moments per horizon.
    pub priors: Vec<GaussianFactorMoments>,
    /// Reconciled base forecasts per horizon.
    pub forecasts: Vec<ReconciledForecast>,
}

impl StepForecasts {
    pub fn horizons(&self) -> usize {
        self.forecasts.len()
    }

    /// Means and variances of every series at horizon `j` (1-based).
    pub fn full_moments(&self, h: &Hierarchy, j: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self
            .forecasts
            .get(j.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("horizon {j} not forecast")))?;
        Ok((f.full_mean(h.summing())?, f.full_variances(h.summing())?))
    }
}

/// One combination weight: base series, regressor source and its posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub series_id: String,
    pub source_level: String,
    pub mean: f64,
    pub sd: f64,
}

/// Stateful dynamic reconciliation.
#[derive(Debug, Clone)]
pub struct Reconciler {
    pub(crate) hierarchy: Hierarchy,
    pub(crate) cfg: ReconcilerConfig,
    pub(crate) mode: Mode,
    pub(crate) mrdlm: Mrdlm,
    pub(crate) sources: Option<Vec<String>>,
    pub(crate) upper_sources: Vec<String>,
    pub(crate) lower_sources: Vec<String>,
    pub(crate) combiner: Option<Combiner>,
    pub(crate) two: Option<TwoStepState>,
    pub(crate) pending: Option<Pending>,
}

fn split_horizons(exo: &[ExoForecast], horizons: usize, n: usize) -> Result<Vec<Vec<ExoForecast>>> {
    let mut out = vec![Vec::new(); horizons];
    for e in exo {
        if e.series >= n {
            return Err(Error::UnknownSeries(format!("series index {}", e.series)));
        }
        if e.horizon >= 1 && e.horizon <= horizons {
            out[e.horizon - 1].push(*e);
        }
    }
    Ok(out)
}

impl Reconciler {
    /// Sets priors from the first `init_window` rows of `data` (full
    /// hierarchy vectors). No observation is absorbed yet.
    pub fn new(h: &Hierarchy, cfg: &ReconcilerConfig, mode: Mode, data: &[Vec<f64>]) -> Result<Self> {
        cfg.validate()?;
        let window = &data[..cfg.init_window.min(data.len())];
        let factor_rows = cfg.factor_rows(h)?;
        let mcfg = cfg.mrdlm_config(factor_rows.len())?;
        let mrdlm = Mrdlm::init(h, factor_rows, &mcfg, window)?;
        let two = if mode == Mode::TwoStep {
            Some(TwoStepState::new(h, cfg)?)
        } else {
            None
        };
        Ok(Self {
            hierarchy: h.clone(),
            cfg: cfg.clone(),
            mode,
            mrdlm,
            sources: None,
            upper_sources: Vec::new(),
            lower_sources: Vec::new(),
            combiner: None,
            two,
            pending: None,
        })
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn config(&self) -> &ReconcilerConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of horizons forecast from the next call on.
    pub fn set_horizons(&mut self, horizons: usize) -> Result<()> {
        if horizons == 0 {
            return Err(Error::Config("horizons must be at least 1".into()));
        }
        self.cfg.horizons = horizons;
        Ok(())
    }

    pub fn mrdlm(&self) -> &Mrdlm {
        &self.mrdlm
    }

    pub fn steps(&self) -> usize {
        self.mrdlm.steps()
    }

    /// Regressor levels, once fixed by the first forecasts.
    pub fn sources(&self) -> Option<&[String]> {
        self.sources.as_deref()
    }

    pub fn partition(&self) -> Option<&SubHierarchyPartition> {
        self.two.as_ref().map(|t| &t.partition)
    }

    /// Absorbs the observation `y` (full hierarchy vector), then forecasts
    /// from `exo`, the forecasts issued at this origin.
    pub fn step(&mut self, y: &[f64], exo: &[ExoForecast]) -> Result<StepForecasts> {
        self.observe(y)?;
        self.forecast(exo)
    }

    /// Combination update with the previous origin's horizon-1 inputs, then
    /// the prior-model update.
    pub fn observe(&mut self, y: &[f64]) -> Result<()> {
        let h = &self.hierarchy;
        if y.len() != h.n() {
            return Err(Error::dim("observation vector", h.n(), y.len()));
        }
        let b = &y[h.n_a()..];
        if let Some(p) = self.pending.take() {
            match self.mode {
                Mode::Prior => {}
                Mode::OneStep => {
                    if let Some(c) = self.combiner.as_mut() {
                        c.update(&p.panel, &p.prior, b)?;
                    }
                }
                Mode::TwoStep => {
                    let two = self.two.as_mut().expect("two-step state");
                    if let (Some(c), Some((up, upanel))) = (two.upper.as_mut(), p.upper.as_ref()) {
                        let yb: Vec<f64> = two.partition.boundary.iter().map(|&r| y[r]).collect();
                        c.update(upanel, up, &yb)?;
                    }
                    if !two.degenerate {
                        let rows = &two.lower_rows;
                        two.lowers.par_iter_mut().zip(rows.par_iter()).try_for_each(|(c, rows)| {
                            let bk: Vec<f64> = rows.iter().map(|&j| b[j]).collect();
                            c.update(&p.panel.select(rows), &p.prior.select(rows), &bk)
                        })?;
                    }
                }
            }
        }
        self.mrdlm.update_full(y)
    }

    /// Reconciled forecasts for horizons `1..=horizons` from the current
    /// prior; without exogenous forecasts these are the prior itself.
    pub fn forecast(&mut self, exo: &[ExoForecast]) -> Result<StepForecasts> {
        let horizons = self.cfg.horizons;
        let priors = self.mrdlm.assemble_prior(horizons)?;
        let by_h = split_horizons(exo, horizons, self.hierarchy.n())?;
        if self.mode != Mode::Prior && self.sources.is_none() && !exo.is_empty() {
            self.fix_sources(exo)?;
        }
        let mut forecasts = Vec::with_capacity(horizons);
        let mut pending = None;
        for (j, (prior, ex)) in priors.iter().zip(&by_h).enumerate() {
            let (fc, p) = if self.mode == Mode::Prior || ex.is_empty() || self.sources.is_none() {
                (ReconciledForecast::from_prior(prior.clone()), None)
            } else if self.mode == Mode::OneStep {
                self.one_step(prior, ex, j + 1)?
            } else {
                self.two_step(prior, ex, j + 1)?
            };
            if j == 0 {
                pending = p;
            }
            forecasts.push(fc);
        }
        self.pending = pending;
        Ok(StepForecasts {
            origin: self.mrdlm.steps(),
            priors,
            forecasts,
        })
    }

    fn fix_sources(&mut self, exo: &[ExoForecast]) -> Result<()> {
        let h = &self.hierarchy;
        let sources: Vec<String> = match &self.cfg.exo_levels {
            Some(l) => {
                if let Some(bad) = l.iter().find(|l| !h.level_order().contains(l)) {
                    return Err(Error::Config(format!("unknown exogenous level `{bad}`")));
                }
                l.clone()
            }
            None => h
                .level_order()
                .iter()
                .filter(|l| exo.iter().any(|e| e.series < h.n() && h.level(e.series) == l.as_str()))
                .cloned()
                .collect(),
        };
        if sources.is_empty() {
            return Ok(());
        }
        match self.mode {
            Mode::Prior => {}
            Mode::OneStep => {
                self.combiner = Some(Combiner::new(h.n_b(), sources.len(), &self.cfg.combination)?);
            }
            Mode::TwoStep => {
                let two = self.two.as_mut().expect("two-step state");
                let bl = two.partition.boundary_level.clone();
                self.upper_sources = sources
                    .iter()
                    .filter(|l| two.degenerate || two.sides.side(l) == Some(Side::Upper))
                    .cloned()
                    .collect();
                self.lower_sources = std::iter::once(bl.clone())
                    .chain(sources.iter().filter(|l| **l != bl && two.sides.side(l) == Some(Side::Lower)).cloned())
                    .collect();
                if !self.upper_sources.is_empty() {
                    two.upper = Some(Combiner::new(
                        two.partition.boundary.len(),
                        self.upper_sources.len(),
                        &self.cfg.two_step.upper,
                    )?);
                }
                if !two.degenerate {
                    two.lowers = two
                        .lower_rows
                        .iter()
                        .map(|rows| Combiner::new(rows.len(), self.lower_sources.len(), &self.cfg.two_step.lower))
                        .collect::<Result<_>>()?;
                }
            }
        }
        self.sources = Some(sources);
        Ok(())
    }

    fn one_step(&self, prior: &GaussianFactorMoments, exo: &[ExoForecast], j: usize) -> Result<(ReconciledForecast, Option<Pending>)> {
        let sources = self.sources.as_ref().expect("sources fixed");
        let panel = build_regressors(prior, exo, &self.hierarchy, sources, self.cfg.rho)?;
        let comb = self.combiner.as_ref().expect("combiner");
        let fc = comb.forecast(&panel, prior, j)?;
        Ok((
            fc,
            Some(Pending {
                prior: prior.clone(),
                panel,
                upper: None,
            }),
        ))
    }

    fn two_step(&self, prior: &GaussianFactorMoments, exo: &[ExoForecast], j: usize) -> Result<(ReconciledForecast, Option<Pending>)> {
        let two = self.two.as_ref().expect("two-step state");
        let h = &self.hierarchy;
        let part = &two.partition;
        let proj = prior.project(h.summing())?;
        let upper_prior = proj
            .rows_factor_form(&part.boundary)
            .ok_or_else(|| Error::Numerical("boundary series overlap".into()))?;

        let upper_exo: Vec<ExoForecast> = exo
            .iter()
            .filter(|e| two.degenerate || two.sides.side(h.level(e.series)) == Some(Side::Upper))
            .filter_map(|e| two.upper_index.get(&e.series).map(|&u| ExoForecast { series: u, ..*e }))
            .collect();
        let upper_panel = build_regressors(&upper_prior, &upper_exo, &part.upper, &self.upper_sources, self.cfg.rho)?;
        let upper_fc = match &two.upper {
            Some(c) => c.forecast(&upper_panel, &upper_prior, j)?,
            None => ReconciledForecast::from_prior(upper_prior.clone()),
        };
        if two.degenerate {
            return Ok((
                upper_fc,
                Some(Pending {
                    prior: prior.clone(),
                    panel: upper_panel.clone(),
                    upper: Some((upper_prior, upper_panel)),
                }),
            ));
        }

        let lower_exo: Vec<ExoForecast> = exo
            .iter()
            .filter(|e| two.sides.side(h.level(e.series)) == Some(Side::Lower))
            .copied()
            .collect();
        let mut boundary_exo: Vec<ExoForecast> = part
            .boundary
            .iter()
            .enumerate()
            .map(|(k, &r)| ExoForecast {
                series: r,
                horizon: j,
                mean: upper_fc.mean()[k],
                var: Some(upper_fc.var(k)),
            })
            .collect();
        let mut passes = 0;
        loop {
            let all: Vec<ExoForecast> = lower_exo.iter().chain(&boundary_exo).copied().collect();
            let panel = build_regressors(prior, &all, h, &self.lower_sources, self.cfg.rho)?;
            let parts = two
                .lowers
                .par_iter()
                .zip(two.lower_rows.par_iter())
                .map(|(c, rows)| Ok((rows.clone(), c.forecast(&panel.select(rows), &prior.select(rows), j)?)))
                .collect::<Result<Vec<_>>>()?;
            let fc = ReconciledForecast::assemble(h.n_b(), prior.factor_cov(), parts)?;
            if passes == self.cfg.two_step.extra_passes {
                return Ok((
                    fc,
                    Some(Pending {
                        prior: prior.clone(),
                        panel,
                        upper: Some((upper_prior, upper_panel)),
                    }),
                ));
            }
            passes += 1;
            for e in boundary_exo.iter_mut() {
                let cols = h.summing().row(e.series);
                e.mean = cols.iter().map(|&c| fc.mean()[c]).sum();
                e.var = Some(fc.quad_indicator(cols));
            }
        }
    }

    /// Current combination weights per base series and source level.
    pub fn weights(&self) -> Vec<WeightRecord> {
        let h = &self.hierarchy;
        let mut out = Vec::new();
        let mut push = |ids: &dyn Fn(usize) -> String, sources: &[String], c: &Combiner| {
            let w = c.weights();
            for i in 0..c.n_b() {
                for (s, src) in sources.iter().enumerate() {
                    out.push(WeightRecord {
                        series_id: ids(i),
                        source_level: src.clone(),
                        mean: w.mean[(i, s)],
                        sd: w.sd[(i, s)],
                    });
                }
            }
        };
        match (&self.combiner, &self.two, &self.sources) {
            (Some(c), _, Some(src)) => push(&|i| h.base_ids()[i].clone(), src, c),
            (None, Some(two), Some(_)) => {
                if let Some(c) = &two.upper {
                    push(&|k| h.id(two.partition.boundary[k]).to_string(), &self.upper_sources, c);
                }
                for (c, rows) in two.lowers.iter().zip(&two.lower_rows) {
                    push(&|i| h.base_ids()[rows[i]].clone(), &self.lower_sources, c);
                }
            }
            _ => {}
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{check_coherence, fixtures};
    use crate::pipeline::Preset;
    use crate::synthetic::{oracle_exo, simulate, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, t_len: usize) -> (Hierarchy, Vec<Vec<f64>>, ReconcilerConfig) {
        let h = fixtures::fig1();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = simulate(
            &h,
            &SimConfig {
                t_len,
                ..SimConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let mut cfg = ReconcilerConfig::preset(Preset::Medium, 0.99);
        cfg.factor_trend = false;
        cfg.horizons = 2;
        (h, y, cfg)
    }

    #[test]
    fn no_forecasts_gives_the_prior() {
        let (h, y, cfg) = setup(1, 40);
        for mode in [Mode::Prior, Mode::OneStep, Mode::TwoStep] {
            let mut r = Reconciler::new(&h, &cfg, mode, &y).unwrap();
            for row in &y {
                let out = r.step(row, &[]).unwrap();
                for (p, f) in out.priors.iter().zip(&out.forecasts) {
                    assert_eq!(f, &ReconciledForecast::from_prior(p.clone()));
                }
            }
        }
    }

    #[test]
    fn prior_mean_forecasts_stay_near_the_prior() {
        let (h, y, cfg) = setup(2, 60);
        let mut r = Reconciler::new(&h, &cfg, Mode::OneStep, &y).unwrap();
        let mut out = None;
        for row in &y {
            let prior = r.mrdlm.assemble_prior(1).unwrap().remove(0);
            let proj = prior.project(h.summing()).unwrap();
            let exo: Vec<ExoForecast> = (0..h.n())
                .map(|s| ExoForecast {
                    series: s,
                    horizon: 1,
                    mean: proj.mean()[s],
                    var: Some(1e-6),
                })
                .collect();
            r.observe(row).unwrap();
            out = Some((r.forecast(&exo).unwrap(), prior));
        }
        let _ = out;
        // at the last origin, forecasts equal to the current prior
        let prior = r.mrdlm.assemble_prior(1).unwrap().remove(0);
        let proj = prior.project(h.summing()).unwrap();
        let exo: Vec<ExoForecast> = (0..h.n())
            .map(|s| ExoForecast {
                series: s,
                horizon: 1,
                mean: proj.mean()[s],
                var: Some(1e-6),
            })
            .collect();
        let f = r.forecast(&exo).unwrap();
        for i in 0..h.n_b() {
            let d = (f.forecasts[0].mean()[i] - prior.mean()[i]).abs();
            assert!(d <= prior.var(i).sqrt(), "series {i}: {d}");
        }
    }

    #[test]
    fn base_boundary_two_step_equals_one_step() {
        let (h, y, mut cfg) = setup(3, 80);
        cfg.two_step.boundary_level = Some("base".into());
        cfg.two_step.upper = cfg.combination.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let exo = oracle_exo(&h, &y, 20, 2, 0.5, None, &mut rng);
        let mut one = Reconciler::new(&h, &cfg, Mode::OneStep, &y).unwrap();
        let mut two = Reconciler::new(&h, &cfg, Mode::TwoStep, &y).unwrap();
        for (t, row) in y.iter().enumerate() {
            let a = one.step(row, exo.at(t)).unwrap();
            let b = two.step(row, exo.at(t)).unwrap();
            for (fa, fb) in a.forecasts.iter().zip(&b.forecasts) {
                assert!((fa.mean() - fb.mean()).abs().max() < 1e-10);
                assert!((fa.variances() - fb.variances()).abs().max() < 1e-10);
            }
        }
    }

    #[test]
    fn fig1_two_step_split_and_coherence() {
        let (h, y, cfg) = setup(4, 80);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let exo = oracle_exo(&h, &y, 20, 2, 0.5, None, &mut rng);
        let mut r = Reconciler::new(&h, &cfg, Mode::TwoStep, &y).unwrap();
        for (t, row) in y.iter().enumerate() {
            let out = r.step(row, exo.at(t)).unwrap();
            for j in 1..=2 {
                let (m, _) = out.full_moments(&h, j).unwrap();
                let c = check_coherence(&[m], h.summing(), 1e-8).unwrap();
                assert!(c.coherent);
            }
        }
        assert_eq!(r.upper_sources, vec!["L0".to_string(), "L1".to_string()]);
        assert_eq!(r.lower_sources, vec!["L1".to_string(), "base".to_string()]);
        assert_eq!(r.partition().unwrap().lowers.len(), 3);
        assert!(!r.weights().is_empty());
    }

    #[test]
    fn informative_forecasts_beat_the_prior() {
        let (h, y, cfg) = setup(5, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let exo = oracle_exo(&h, &y, 0, 1, 0.5, None, &mut rng);
        let mut r = Reconciler::new(&h, &cfg, Mode::OneStep, &y).unwrap();
        let (mut se_prior, mut se_rec) = (0.0, 0.0);
        let mut last: Option<StepForecasts> = None;
        for (t, row) in y.iter().enumerate() {
            if let Some(prev) = last.take() {
                if t > 100 {
                    for i in 0..h.n_b() {
                        let b = row[h.n_a() + i];
                        se_prior += (prev.priors[0].mean()[i] - b).powi(2);
                        se_rec += (prev.forecasts[0].mean()[i] - b).powi(2);
                    }
                }
            }
            last = Some(r.step(row, exo.at(t)).unwrap());
        }
        assert!(se_rec <= se_prior, "{se_rec} vs {se_prior}");
    }
}
