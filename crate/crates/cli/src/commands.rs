use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use dynrecon::hierarchy::Hierarchy;
use dynrecon::io::{
    create, exo_rows, open, read_checkpoint, read_exo, read_hierarchy, read_panel, read_rows, write_checkpoint,
    write_hierarchy, write_panel, write_rows_with_header, ForecastRow, RunConfig, ScoreInputRow, SeriesPanel,
    TimeKey, WeightRow, EXO_HEADER, FORECAST_HEADER, SCORE_INPUT_HEADER, WEIGHT_HEADER,
};
use dynrecon::methods::{dynamic_reconciler, MethodContext, MethodRegistry};
use dynrecon::pipeline::{backtest, ExoStream, Reconciler, StepForecasts};
use dynrecon::scoring::{report_relative, write_cells_csv, ScoreAccumulator};
use dynrecon::synthetic::{oracle_exo, simulate, tree_hierarchy, SimConfig};
use dynrecon::Error;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Command, Inputs};

/// A failed command: bad usage (exit 1) or a library error.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib(Error),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(e) => e.exit_code(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type Res<T = ()> = Result<T, Failure>;

pub fn run(cmd: Command) -> Res {
    match cmd {
        Command::Fit {
            inputs,
            checkpoint,
            method,
        } => fit(&inputs, &checkpoint, method),
        Command::Forecast { checkpoint, horizon, out } => forecast(&checkpoint, horizon, out.as_deref()),
        Command::Reconcile {
            checkpoint,
            exo,
            data,
            horizon,
            out,
            weights,
            save,
        } => reconcile(&checkpoint, exo.as_deref(), data.as_deref(), horizon, out.as_deref(), weights, save.as_deref()),
        Command::Backtest {
            inputs,
            out,
            benchmark,
            horizon,
            methods,
            forecasts_out,
        } => run_backtest(&inputs, out.as_deref(), benchmark, horizon, methods, forecasts_out.as_deref()),
        Command::Score {
            data,
            hierarchy,
            forecasts,
            benchmark,
            out,
        } => score(&data, &hierarchy, &forecasts, benchmark.as_deref(), out.as_deref()),
        Command::Simulate {
            out,
            shape,
            periods,
            horizon,
            seed,
        } => run_simulate(&out, &shape, periods, horizon, seed),
    }
}

fn output(path: Option<&Path>) -> Res<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

struct Loaded {
    cfg: RunConfig,
    h: Hierarchy,
    panel: SeriesPanel,
    exo: ExoStream,
}

fn load(inputs: &Inputs) -> Res<Loaded> {
    let cfg = match &inputs.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let need = |flag: &Option<PathBuf>, conf: &Option<PathBuf>, name: &str| {
        flag.clone()
            .or_else(|| conf.clone())
            .ok_or_else(|| Failure::Usage(format!("--{name} is required (or set `{name}` in the config)")))
    };
    let h = read_hierarchy(open(&need(&inputs.hierarchy, &cfg.hierarchy, "hierarchy")?)?)?;
    let panel = read_panel(open(&need(&inputs.data, &cfg.data, "data")?)?, &h)?;
    let exo = match inputs.exo.clone().or_else(|| cfg.exo.clone()) {
        Some(p) => read_exo(open(&p)?, &h, &panel.time_index())?,
        None => ExoStream::new(),
    };
    Ok(Loaded { cfg, h, panel, exo })
}

fn forecast_rows(h: &Hierarchy, f: &StepForecasts) -> Res<Vec<ForecastRow>> {
    let mut rows = Vec::with_capacity(f.horizons() * h.n());
    for j in 1..=f.horizons() {
        let (m, v) = f.full_moments(h, j)?;
        for i in 0..h.n() {
            rows.push(ForecastRow {
                series_id: h.id(i).to_string(),
                horizon: j,
                mean: m[i],
                variance: v[i],
            });
        }
    }
    Ok(rows)
}

fn weight_rows(rec: &Reconciler, time: &str) -> Vec<WeightRow> {
    rec.weights()
        .into_iter()
        .map(|w| WeightRow {
            time: time.to_string(),
            series_id: w.series_id,
            source_level: w.source_level,
            weight_mean: w.mean,
            weight_sd: w.sd,
        })
        .collect()
}

fn fit(inputs: &Inputs, checkpoint: &Path, method: Option<String>) -> Res {
    let Loaded { cfg, h, panel, exo } = load(inputs)?;
    let method = method.unwrap_or_else(|| cfg.method.clone());
    let mut rec = dynamic_reconciler(&method, &h, &cfg.reconciler()?, &panel.rows)?;
    for (t, y) in panel.rows.iter().enumerate() {
        rec.step(y, exo.at(t))?;
    }
    write_checkpoint(create(checkpoint)?, &rec, panel.times.last().expect("panel has rows"))?;
    println!(
        "fitted {method}: n={} n_a={} n_b={} n_x={} steps={}",
        h.n(),
        h.n_a(),
        h.n_b(),
        rec.mrdlm().n_x(),
        rec.steps()
    );
    Ok(())
}

fn forecast(checkpoint: &Path, horizon: Option<usize>, out: Option<&Path>) -> Res {
    let mut rec = read_checkpoint(open(checkpoint)?)?.reconciler;
    if let Some(hz) = horizon {
        rec.set_horizons(hz)?;
    }
    let f = rec.forecast(&[])?;
    write_rows_with_header(output(out)?, &FORECAST_HEADER, &forecast_rows(rec.hierarchy(), &f)?)?;
    Ok(())
}

fn reconcile(
    checkpoint: &Path,
    exo: Option<&Path>,
    data: Option<&Path>,
    horizon: Option<usize>,
    out: Option<&Path>,
    weights: Option<PathBuf>,
    save: Option<&Path>,
) -> Res {
    let ck = read_checkpoint(open(checkpoint)?)?;
    let mut rec = ck.reconciler;
    if let Some(hz) = horizon {
        rec.set_horizons(hz)?;
    }
    let h = rec.hierarchy().clone();
    let mut panel = SeriesPanel {
        times: vec![ck.last_time.clone()],
        rows: vec![Vec::new()],
    };
    if let Some(p) = data {
        let more = read_panel(open(p)?, &h)?;
        let first = TimeKey::parse(&more.times[0]);
        if first.is_none() || first <= TimeKey::parse(&ck.last_time) {
            return Err(Error::Data(format!(
                "new rows start at `{}`, not after the checkpoint time `{}`",
                more.times[0], ck.last_time
            ))
            .into());
        }
        panel.times.extend(more.times);
        panel.rows.extend(more.rows);
    }
    let stream = match exo {
        Some(p) => read_exo(open(p)?, &h, &panel.time_index())?,
        None => ExoStream::new(),
    };
    if horizon.is_none() {
        let last = panel.rows.len() - 1;
        let needed = stream.at(last).iter().map(|e| e.horizon).max().unwrap_or(0);
        if needed > rec.config().horizons {
            rec.set_horizons(needed)?;
        }
    }
    let mut f = rec.forecast(stream.at(0))?;
    let mut wrows = weight_rows(&rec, &panel.times[0]);
    for t in 1..panel.rows.len() {
        rec.observe(&panel.rows[t])?;
        f = rec.forecast(stream.at(t))?;
        wrows.extend(weight_rows(&rec, &panel.times[t]));
    }
    let rows = forecast_rows(&h, &f)?;
    if let Some((bad, _)) = rows.iter().enumerate().find(|(_, r)| !r.mean.is_finite() || !r.variance.is_finite()) {
        return Err(Error::Numerical(format!("non-finite reconciled moments for `{}`", rows[bad].series_id)).into());
    }
    write_rows_with_header(output(out)?, &FORECAST_HEADER, &rows)?;
    let weights = weights.or_else(|| {
        out.map(|o| {
            let stem = o.file_stem().map_or("reconciled".into(), |s| s.to_string_lossy().into_owned());
            o.with_file_name(format!("{stem}_weights.csv"))
        })
    });
    if let Some(w) = weights {
        write_rows_with_header(create(&w)?, &WEIGHT_HEADER, &wrows)?;
    }
    if let Some(s) = save {
        write_checkpoint(create(s)?, &rec, panel.times.last().expect("origin"))?;
    }
    Ok(())
}

fn run_backtest(
    inputs: &Inputs,
    out: Option<&Path>,
    benchmark: Option<String>,
    horizon: Option<usize>,
    methods: Option<Vec<String>>,
    forecasts_out: Option<&Path>,
) -> Res {
    let Loaded { cfg, h, panel, exo } = load(inputs)?;
    let mut plan = cfg.backtest.clone();
    if let Some(hz) = horizon {
        plan.horizons = hz;
    }
    if let Some(day) = cfg.weekday() {
        plan.origins = Some(panel.rows_on_weekday(day)?);
    }
    plan.keep_records |= forecasts_out.is_some();
    plan.validate(panel.len())?;
    let mut rcfg = cfg.reconciler()?;
    rcfg.horizons = plan.horizons;
    let names = methods.unwrap_or_else(|| cfg.methods.clone());
    let benchmark = match benchmark {
        Some(b) if !names.contains(&b) => {
            return Err(Failure::Usage(format!("benchmark `{b}` is not among the methods run")));
        }
        Some(b) => Some(b),
        None => cfg.benchmark.clone().filter(|b| names.contains(b)),
    };
    let ctx = MethodContext {
        hierarchy: &h,
        config: &rcfg,
        init_data: &panel.rows[..plan.train_length],
        horizons: plan.horizons,
        residual_window: cfg.residual_window.unwrap_or(plan.train_length),
    };
    let mut ms = MethodRegistry::default().create_all(&names, &ctx)?;
    info!("backtesting {} methods over {} rows", ms.len(), panel.len());
    let outcome = backtest(&h, &panel.rows, &exo, &plan, &mut ms, benchmark.as_deref())?;
    let mut stdout = io::stdout().lock();
    writeln!(
        stdout,
        "origins: {}, scored: {}, benchmark: {}",
        outcome.iterations,
        outcome.scored_origins,
        benchmark.as_deref().unwrap_or("none")
    )?;
    for t in &outcome.tables {
        writeln!(stdout, "\n{}", t.render_text())?;
    }
    if let Some(o) = out {
        write_cells_csv(outcome.tables.iter().flat_map(|t| t.cells()), create(o)?)?;
    }
    if let Some(fo) = forecasts_out {
        let rows: Vec<ScoreInputRow> = outcome
            .records
            .iter()
            .map(|r| ScoreInputRow {
                method: r.method.clone(),
                origin_time: panel.times[r.origin].clone(),
                series_id: h.id(r.series).to_string(),
                horizon: r.horizon,
                mean: r.mean,
                variance: r.var,
            })
            .collect();
        write_rows_with_header(create(fo)?, &SCORE_INPUT_HEADER, &rows)?;
    }
    Ok(())
}

fn score(data: &Path, hierarchy: &Path, forecasts: &Path, benchmark: Option<&str>, out: Option<&Path>) -> Res {
    let h = read_hierarchy(open(hierarchy)?)?;
    let panel = read_panel(open(data)?, &h)?;
    let rows: Vec<ScoreInputRow> = read_rows(open(forecasts)?)?;
    dynrecon::io::check_ids(&h, rows.iter().map(|r| r.series_id.as_str()))?;
    let index = panel.time_index();
    let mut acc = ScoreAccumulator::new(h.level_order().to_vec());
    let mut used = 0;
    for (k, r) in rows.iter().enumerate() {
        let origin = TimeKey::parse(&r.origin_time)
            .and_then(|t| index.get(&t).copied())
            .ok_or_else(|| Error::Parse {
                line: k + 2,
                message: format!("origin time `{}` is not in the data", r.origin_time),
            })?;
        let Some(y) = panel.rows.get(origin + r.horizon) else {
            continue;
        };
        let i = h.index_of(&r.series_id).expect("checked");
        acc.add(&r.method, h.level(i), r.horizon, r.mean, Some(r.variance), y[i])?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Data("no forecast has a realised value in the data".into()).into());
    }
    let mut tables = acc.tables()?;
    if let Some(b) = benchmark {
        tables = tables.iter().map(|t| report_relative(t, b)).collect::<dynrecon::Result<_>>()?;
    }
    let mut stdout = io::stdout().lock();
    for t in &tables {
        writeln!(stdout, "{}\n", t.render_text())?;
    }
    if let Some(o) = out {
        write_cells_csv(tables.iter().flat_map(|t| t.cells()), create(o)?)?;
    }
    Ok(())
}

fn run_simulate(dir: &Path, shape: &[usize], periods: usize, horizon: usize, seed: u64) -> Res {
    if periods < 10 || horizon == 0 {
        return Err(Failure::Usage("need at least 10 periods and a positive horizon".into()));
    }
    fs::create_dir_all(dir)?;
    let h = tree_hierarchy(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = SimConfig {
        t_len: periods,
        season: Some((12, 2.0)),
        ..SimConfig::default()
    };
    let rows = simulate(&h, &sim, &mut rng)?;
    let exo = oracle_exo(&h, &rows, 0, horizon, 0.7, None, &mut rng);
    let panel = SeriesPanel {
        times: (0..periods).map(|t| t.to_string()).collect(),
        rows,
    };
    write_hierarchy(create(&dir.join("hierarchy.csv"))?, &h)?;
    write_panel(create(&dir.join("data.csv"))?, &h, &panel)?;
    write_rows_with_header(create(&dir.join("exo.csv"))?, &EXO_HEADER, &exo_rows(&h, &exo, &panel.times))?;
    let mut cfg = RunConfig {
        seed,
        data: Some("data.csv".into()),
        hierarchy: Some("hierarchy.csv".into()),
        exo: Some("exo.csv".into()),
        ..RunConfig::default()
    };
    cfg.backtest.horizons = horizon;
    cfg.backtest.train_length = (periods / 3).max(2);
    cfg.backtest.warmup = (periods / 10).min(52);
    fs::write(dir.join("config.json"), cfg.to_json()? + "\n")?;
    println!("wrote {} series over {periods} periods to {}", h.n(), dir.display());
    Ok(())
}
