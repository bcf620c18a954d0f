//! File formats: CSV panels, hierarchies, forecasts, scores and weights; the
//! JSON run configuration; binary checkpoints.

mod checkpoint;
mod panel;
mod records;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use panel::{read_hierarchy, read_panel, write_hierarchy, write_panel, SeriesPanel, TimeKey};
pub use records::{
    check_ids, exo_rows, read_exo, read_rows, write_rows, write_rows_with_header, ExoRow, ForecastRow, ScoreInputRow,
    WeightRow, EXO_HEADER, FORECAST_HEADER, SCORE_INPUT_HEADER, WEIGHT_HEADER,
};

use crate::error::{Error, Result};
use crate::methods::BUILTIN_METHODS;
use crate::pipeline::{BacktestPlan, Preset, ReconcilerConfig};

pub(crate) fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse {
            line: p.line() as usize,
            message: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        },
        None => Error::Csv(e),
    }
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))
}

pub const SCHEMA_VERSION: u32 = 1;

fn default_method() -> String {
    "dhf".into()
}

fn default_methods() -> Vec<String> {
    BUILTIN_METHODS.iter().map(|s| s.to_string()).collect()
}

fn default_benchmark() -> Option<String> {
    Some("bu-diag".into())
}

/// Everything a command needs besides the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Discount profile; excludes `reconciler`.
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Weight discount used with `preset`.
    #[serde(default)]
    pub weight_discount: Option<f64>,
    #[serde(default)]
    pub reconciler: Option<ReconcilerConfig>,
    #[serde(default)]
    pub backtest: BacktestPlan,
    /// Method fitted by `fit`.
    #[serde(default = "default_method")]
    pub method: String,
    /// Methods compared by `backtest`.
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_benchmark")]
    pub benchmark: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Residual rows behind the MinT and shrinkage covariances.
    #[serde(default)]
    pub residual_window: Option<usize>,
    /// Score only origins on this weekday (`"Sun"`, `"Monday"`, …).
    #[serde(default)]
    pub forecast_weekday: Option<String>,
    /// Input files, relative to the configuration file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub hierarchy: Option<PathBuf>,
    #[serde(default)]
    pub exo: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset: None,
            weight_discount: None,
            reconciler: None,
            backtest: BacktestPlan::default(),
            method: default_method(),
            methods: default_methods(),
            benchmark: default_benchmark(),
            seed: 0,
            residual_window: None,
            forecast_weekday: None,
            data: None,
            hierarchy: None,
            exo: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        match v.get("schema_version") {
            None => return Err(Error::Config("missing `schema_version`".into())),
            Some(n) if n.as_u64() != Some(SCHEMA_VERSION as u64) => {
                return Err(Error::Config(format!(
                    "schema_version {n} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            _ => {}
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file and resolves its paths against the
    /// file's directory; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let mut s = String::new();
        open(path)?.read_to_string(&mut s)?;
        let mut cfg = Self::from_json(&s)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.hierarchy, &mut cfg.exo].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.preset.is_some() && self.reconciler.is_some() {
            return Err(Error::Config("give either `preset` or `reconciler`, not both".into()));
        }
        if self.weight_discount.is_some() && self.preset.is_none() {
            return Err(Error::Config("`weight_discount` needs `preset`".into()));
        }
        if let Some(d) = &self.forecast_weekday {
            d.parse::<chrono::Weekday>()
                .map_err(|_| Error::Config(format!("unknown weekday `{d}`")))?;
        }
        self.reconciler()?.validate()
    }

    pub fn reconciler(&self) -> Result<ReconcilerConfig> {
        Ok(match (&self.reconciler, self.preset) {
            (Some(r), _) => r.clone(),
            (None, Some(p)) => ReconcilerConfig::preset(p, self.weight_discount.unwrap_or(0.99)),
            (None, None) => ReconcilerConfig::default(),
        })
    }

    pub fn weekday(&self) -> Option<chrono::Weekday> {
        self.forecast_weekday.as_ref().and_then(|d| d.parse().ok())
    }
}
