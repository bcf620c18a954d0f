use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Weekday};

use super::{csv_error, reader};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;

/// A parsed time label: integer tick or UTC timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimeKey {
    Tick(i64),
    Utc(NaiveDateTime),
}

impl TimeKey {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(v) = s.parse::<i64>() {
            return Some(TimeKey::Tick(v));
        }
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return d.and_hms_opt(0, 0, 0).map(TimeKey::Utc);
        }
        if let Ok(t) = DateTime::parse_from_rfc3339(s) {
            return Some(TimeKey::Utc(t.naive_utc()));
        }
        NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").ok().map(TimeKey::Utc)
    }

    pub fn weekday(&self) -> Option<Weekday> {
        match self {
            TimeKey::Tick(_) => None,
            TimeKey::Utc(t) => Some(t.weekday()),
        }
    }
}

/// Observations of every series of a hierarchy over a time index.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    pub times: Vec<String>,
    /// Full hierarchy vectors in series order; `NaN` marks a missing value.
    pub rows: Vec<Vec<f64>>,
}

impl SeriesPanel {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row index of every time label.
    pub fn time_index(&self) -> HashMap<TimeKey, usize> {
        self.times
            .iter()
            .enumerate()
            .filter_map(|(i, t)| TimeKey::parse(t).map(|k| (k, i)))
            .collect()
    }

    /// Rows falling on `day`; needs calendar time labels.
    pub fn rows_on_weekday(&self, day: Weekday) -> Result<Vec<usize>> {
        self.times
            .iter()
            .enumerate()
            .map(|(i, t)| match TimeKey::parse(t).and_then(|k| k.weekday()) {
                Some(w) => Ok((w == day).then_some(i)),
                None => Err(Error::Data(format!("time `{t}` is not a calendar date"))),
            })
            .filter_map(|r| r.transpose())
            .collect()
    }
}

fn parse_value(s: &str) -> Option<f64> {
    match s.trim() {
        "" | "NA" | "na" | "NaN" | "nan" => Some(f64::NAN),
        v => v.parse().ok(),
    }
}

/// Reads a wide panel: a time column followed by one column per series.
/// Base series must all be present; missing aggregate columns or cells are
/// filled by summation.
pub fn read_panel<R: Read>(r: R, h: &Hierarchy) -> Result<SeriesPanel> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.len() < 2 {
        return Err(Error::Data("panel needs a time column and at least one series column".into()));
    }
    let mut cols: Vec<usize> = Vec::with_capacity(headers.len() - 1);
    let mut unknown = Vec::new();
    let mut seen = BTreeMap::new();
    for name in headers.iter().skip(1) {
        match h.index_of(name) {
            Some(i) => {
                if seen.insert(i, ()).is_some() {
                    return Err(Error::DuplicateId(name.to_string()));
                }
                cols.push(i);
            }
            None => unknown.push(name.to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Data(format!("columns not in the hierarchy: {}", unknown.join(", "))));
    }
    let missing: Vec<&str> = (h.n_a()..h.n()).filter(|i| !seen.contains_key(i)).map(|i| h.id(i)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("base series missing from the panel: {}", missing.join(", "))));
    }

    let mut times = Vec::new();
    let mut rows = Vec::new();
    let mut last: Option<TimeKey> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let t = rec.get(0).unwrap_or("").trim().to_string();
        let key = TimeKey::parse(&t).ok_or_else(|| Error::Parse {
            line,
            message: format!("unreadable time `{t}`"),
        })?;
        if let Some(prev) = last {
            if std::mem::discriminant(&prev) != std::mem::discriminant(&key) {
                return Err(Error::Parse {
                    line,
                    message: "time labels mix integer ticks and dates".into(),
                });
            }
            if key <= prev {
                return Err(Error::Parse {
                    line,
                    message: format!("time `{t}` does not increase"),
                });
            }
        }
        last = Some(key);
        let mut y = vec![f64::NAN; h.n()];
        for (field, &i) in rec.iter().skip(1).zip(&cols) {
            y[i] = parse_value(field).ok_or_else(|| Error::Parse {
                line,
                message: format!("value `{field}` of `{}` is not a number", h.id(i)),
            })?;
        }
        let sums = h.aggregate(&y[h.n_a()..])?;
        for i in 0..h.n_a() {
            if !y[i].is_finite() {
                y[i] = sums[i];
            }
        }
        times.push(t);
        rows.push(y);
    }
    if rows.is_empty() {
        return Err(Error::Data("no rows".into()));
    }
    Ok(SeriesPanel { times, rows })
}

/// Writes every series in hierarchy order; missing values are empty cells.
pub fn write_panel<W: Write>(w: W, h: &Hierarchy, panel: &SeriesPanel) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(std::iter::once("time").chain(h.ids().iter().map(String::as_str)))?;
    for (t, y) in panel.times.iter().zip(&panel.rows) {
        let mut rec = vec![t.clone()];
        rec.extend(y.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v:?}") }));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads `parent,child` edges, with optional `parent_level` and
/// `child_level` columns.
pub fn read_hierarchy<R: Read>(r: R) -> Result<Hierarchy> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (p, c) = match (col("parent"), col("child")) {
        (Some(p), Some(c)) => (p, c),
        _ => return Err(Error::Data("hierarchy file needs `parent` and `child` columns".into())),
    };
    let (pl, cl) = (col("parent_level"), col("child_level"));
    let known = [Some(p), Some(c), pl, cl];
    if let Some(extra) = (0..headers.len()).find(|i| !known.contains(&Some(*i))) {
        return Err(Error::Data(format!("unknown hierarchy column `{}`", &headers[extra])));
    }
    let mut edges = Vec::new();
    let mut labels: BTreeMap<String, String> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let (parent, child) = (get(p), get(c));
        if parent.is_empty() || child.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty series id".into(),
            });
        }
        for (id, li) in [(&parent, pl), (&child, cl)] {
            let Some(li) = li else { continue };
            let label = get(li);
            if label.is_empty() {
                continue;
            }
            if let Some(old) = labels.insert(id.clone(), label.clone()) {
                if old != label {
                    return Err(Error::Parse {
                        line,
                        message: format!("series `{id}` labelled both `{old}` and `{label}`"),
                    });
                }
            }
        }
        edges.push((parent, child));
    }
    if edges.is_empty() {
        return Err(Error::Data("no rows".into()));
    }
    Hierarchy::from_edges_with_levels(&edges, &labels)
}

pub fn write_hierarchy<W: Write>(w: W, h: &Hierarchy) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["parent", "child", "parent_level", "child_level"])?;
    for (p, c) in h.edges() {
        let (pi, ci) = (h.index_of(p).expect("edge id"), h.index_of(c).expect("edge id"));
        wtr.write_record([p, c, h.level(pi), h.level(ci)])?;
    }
    wtr.flush()?;
    Ok(())
}
