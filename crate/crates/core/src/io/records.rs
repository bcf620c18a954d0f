use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::panel::TimeKey;
use super::{csv_error, reader};
use crate::disagg::ExoForecast;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::pipeline::ExoStream;

/// One exogenous forecast as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExoRow {
    pub series_id: String,
    pub origin_time: String,
    pub horizon: usize,
    pub mean: f64,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub series_id: String,
    pub horizon: usize,
    pub mean: f64,
    pub variance: f64,
}

/// A forecast to be scored against a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInputRow {
    pub method: String,
    pub origin_time: String,
    pub series_id: String,
    pub horizon: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub time: String,
    pub series_id: String,
    pub source_level: String,
    pub weight_mean: f64,
    pub weight_sd: f64,
}

/// Deserialises every row, reporting the line of the first bad one.
pub fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(r: R) -> Result<Vec<T>> {
    let mut rdr = reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(csv_error)?);
    }
    Ok(out)
}

pub fn write_rows<T: Serialize, W: Write>(w: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Header-only file for an empty row set, so readers still see the columns.
pub fn write_rows_with_header<T: Serialize, W: Write>(w: W, header: &[&str], rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(header)?;
        wtr.flush()?;
        return Ok(());
    }
    write_rows(w, rows)
}

pub const EXO_HEADER: [&str; 5] = ["series_id", "origin_time", "horizon", "mean", "variance"];
pub const FORECAST_HEADER: [&str; 4] = ["series_id", "horizon", "mean", "variance"];
pub const SCORE_INPUT_HEADER: [&str; 6] = ["method", "origin_time", "series_id", "horizon", "mean", "variance"];
pub const WEIGHT_HEADER: [&str; 5] = ["time", "series_id", "source_level", "weight_mean", "weight_sd"];

/// Every id in `ids` absent from `h`, as one error.
pub fn check_ids<'a>(h: &Hierarchy, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let unknown: BTreeSet<&str> = ids.filter(|id| h.index_of(id).is_none()).collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::UnknownSeries(unknown.into_iter().collect::<Vec<_>>().join("`, `")))
    }
}

/// Reads exogenous forecasts and keys them by the row index of their origin.
/// Records issued before the first panel time are skipped.
pub fn read_exo<R: Read>(r: R, h: &Hierarchy, time_index: &HashMap<TimeKey, usize>) -> Result<ExoStream> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: ExoRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        rows.push((line, row));
    }
    check_ids(h, rows.iter().map(|(_, r)| r.series_id.as_str()))?;
    let first = time_index.iter().min_by_key(|(_, &i)| i).map(|(t, _)| t);
    let mut stream = ExoStream::new();
    for (line, row) in &rows {
        let line = *line;
        let key = TimeKey::parse(&row.origin_time);
        if let (Some(k), Some(f)) = (&key, first) {
            if std::mem::discriminant(k) == std::mem::discriminant(f) && k < f {
                continue;
            }
        }
        let origin = key
            .and_then(|t| time_index.get(&t).copied())
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("origin time `{}` is not in the data", row.origin_time),
            })?;
        if row.horizon == 0 {
            return Err(Error::Parse {
                line,
                message: "horizon must be at least 1".into(),
            });
        }
        if !row.mean.is_finite() || row.variance.is_some_and(|v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "mean must be finite and variance non-negative".into(),
            });
        }
        stream.push(
            origin,
            ExoForecast {
                series: h.index_of(&row.series_id).expect("checked"),
                horizon: row.horizon,
                mean: row.mean,
                var: row.variance,
            },
        );
    }
    Ok(stream)
}

/// Inverse of [`read_exo`] given the panel's time labels.
pub fn exo_rows(h: &Hierarchy, stream: &ExoStream, times: &[String]) -> Vec<ExoRow> {
    stream
        .origins()
        .flat_map(|o| {
            stream.at(o).iter().map(move |e| ExoRow {
                series_id: h.id(e.series).to_string(),
                origin_time: times[o].clone(),
                horizon: e.horizon,
                mean: e.mean,
                variance: e.var,
            })
        })
        .collect()
}
