//! Simulated hierarchies, panels and exogenous forecasts for tests and
//! demos.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::disagg::ExoForecast;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::pipeline::ExoStream;

/// A balanced tree: `branching[d]` children for every node at depth `d`.
pub fn tree_hierarchy(branching: &[usize]) -> Result<Hierarchy> {
    if branching.is_empty() || branching.iter().any(|&b| b == 0) {
        return Err(Error::Config("branching factors must be positive".into()));
    }
    let mut edges = Vec::new();
    let mut frontier = vec!["T".to_string()];
    for &b in branching {
        let mut next = Vec::with_capacity(frontier.len() * b);
        for p in &frontier {
            for c in 0..b {
                let id = format!("{p}_{c}");
                edges.push((p.clone(), id.clone()));
                next.push(id);
            }
        }
        frontier = next;
    }
    Hierarchy::from_edges(&edges)
}

/// A tree with `levels` levels (root and base included) and random fan-out
/// of at least 2, small enough that there are at most `max_base` base series.
pub fn random_hierarchy<R: Rng>(rng: &mut R, levels: usize, max_branch: usize, max_base: usize) -> Result<Hierarchy> {
    if levels < 2 || max_branch < 2 || max_base < 2 {
        return Err(Error::Config("need at least two levels, fan-out and base series".into()));
    }
    let depth = (levels - 1) as i32;
    let mut cap = 2;
    while ((cap + 1) as f64).powi(depth) <= max_base as f64 {
        cap += 1;
    }
    let cap = cap.min(max_branch);
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut frontier = vec!["T".to_string()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for p in &frontier {
            for c in 0..rng.random_range(2..=cap) {
                let id = format!("{p}_{c}");
                edges.push((p.clone(), id.clone()));
                next.push(id);
            }
        }
        frontier = next;
    }
    Hierarchy::from_edges(&edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub t_len: usize,
    /// Seasonal period and amplitude.
    pub season: Option<(usize, f64)>,
    /// Base noise standard deviation.
    pub noise_sd: f64,
    /// Standard deviation of the common random-walk steps.
    pub common_sd: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            t_len: 150,
            season: None,
            noise_sd: 1.0,
            common_sd: 0.3,
        }
    }
}

/// Base series `μ_i + β_i c_t + s_i(t) + ε_it` with a shared random walk
/// `c_t`; returns full hierarchy rows.
pub fn simulate<R: Rng>(h: &Hierarchy, cfg: &SimConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let n_b = h.n_b();
    let nz = Normal::new(0.0, 1.0).expect("unit normal");
    let mu: Vec<f64> = (0..n_b).map(|_| rng.random_range(5.0..15.0)).collect();
    let beta: Vec<f64> = (0..n_b).map(|_| rng.random_range(0.5..1.5)).collect();
    let phase: Vec<f64> = (0..n_b).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut c = 0.0;
    (0..cfg.t_len)
        .map(|t| {
            c += cfg.common_sd * nz.sample(rng);
            let b: Vec<f64> = (0..n_b)
                .map(|i| {
                    let s = cfg.season.map_or(0.0, |(p, a)| {
                        a * (std::f64::consts::TAU * t as f64 / p as f64 + phase[i]).sin()
                    });
                    mu[i] + beta[i] * c + s + cfg.noise_sd * nz.sample(rng)
                })
                .collect();
            h.aggregate(&b)
        })
        .collect()
}

/// Forecasts of every series in `levels` (all when `None`) made at origins
/// `from..t − 1`: the realised value plus noise with standard deviation
/// `rel_sd · √(base count)`, reported with that variance.
pub fn oracle_exo<R: Rng>(
    h: &Hierarchy,
    y: &[Vec<f64>],
    from: usize,
    horizons: usize,
    rel_sd: f64,
    levels: Option<&[String]>,
    rng: &mut R,
) -> ExoStream {
    let nz = Normal::new(0.0, 1.0).expect("unit normal");
    let mut stream = ExoStream::new();
    let rows: Vec<usize> = (0..h.n())
        .filter(|&r| levels.is_none_or(|l| l.iter().any(|x| x == h.level(r))))
        .collect();
    for t in from..y.len().saturating_sub(1) {
        for j in 1..=horizons {
            if t + j >= y.len() {
                break;
            }
            for &r in &rows {
                let sd = rel_sd * (h.summing().row(r).len() as f64).sqrt();
                stream.push(
                    t,
                    ExoForecast {
                        series: r,
                        horizon: j,
                        mean: y[t + j][r] + sd * nz.sample(rng),
                        var: Some(sd * sd),
                    },
                );
            }
        }
    }
    stream
}

/// Naive seasonal-mean forecasts from data up to each origin: the mean of the
/// same season over the last `cycles` cycles, with the variance of those
/// values.
pub fn seasonal_mean_exo(y: &[Vec<f64>], from: usize, horizons: usize, period: usize, cycles: usize) -> ExoStream {
    let mut stream = ExoStream::new();
    let n = y.first().map_or(0, |r| r.len());
    for t in from..y.len() {
        for j in 1..=horizons {
            for r in 0..n {
                let vals: Vec<f64> = (0..cycles.max(1))
                    .filter_map(|c| {
                        let back = (c + 1) * period.max(1);
                        let target = t + j;
                        (target >= back && target - back <= t).then(|| y[target - back][r])
                    })
                    .filter(|v| v.is_finite())
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = if vals.len() > 1 {
                    vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
                } else {
                    m.abs().max(1.0)
                };
                stream.push(
                    t,
                    ExoForecast {
                        series: r,
                        horizon: j,
                        mean: m,
                        var: Some(v.max(1e-8)),
                    },
                );
            }
        }
    }
    stream
}
