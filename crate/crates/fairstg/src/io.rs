//! CSV ingestion and emission.
//!
//! Wide files have a timestamp column followed by one column per node;
//! long files have `timestamp,node,value` rows. Empty cells and `NaN` are
//! missing values.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};

use fairstg_core::data::{MissingPolicy, RawDataset};
use fairstg_core::tensor::Matrix;

use crate::config::CsvFormat;
use crate::error::{CliError, Result};

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Accepts RFC 3339, `YYYY-MM-DD HH:MM[:SS]` (read as UTC) and integer
/// Unix seconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    s.parse::<i64>().ok()
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| ts.to_string())
}

fn parse_value(cell: &str) -> Option<f64> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    cell.parse::<f64>().ok()
}

/// Series before validation: `values` is `N × T` with NaN for gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<i64>,
    pub node_ids: Vec<String>,
    pub values: Matrix,
}

impl SeriesTable {
    pub fn into_dataset(self, policy: MissingPolicy) -> Result<RawDataset> {
        Ok(RawDataset::new(self.values, self.timestamps, self.node_ids, policy)?)
    }
}

pub fn read_series(path: &Path, format: CsvFormat) -> Result<SeriesTable> {
    match format {
        CsvFormat::Wide => read_wide(path),
        CsvFormat::Long => read_long(path),
    }
}

pub fn read_wide(path: &Path) -> Result<SeriesTable> {
    let mut reader = open(path)?;
    let headers = reader.headers().map_err(|e| data_err(path, e))?.clone();
    if headers.len() < 2 {
        return Err(data_err(path, "expected a timestamp column and at least one node column"));
    }
    let node_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n = node_ids.len();
    let mut timestamps = Vec::new();
    let mut columns: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| data_err(path, format!("row {row}: {e}")))?;
        if record.len() != n + 1 {
            return Err(data_err(path, format!("row {row}: expected {} columns, found {}", n + 1, record.len())));
        }
        let ts = parse_timestamp(&record[0])
            .ok_or_else(|| data_err(path, format!("row {row}, column 1: bad timestamp {:?}", &record[0])))?;
        timestamps.push(ts);
        for c in 1..=n {
            let v = parse_value(&record[c])
                .ok_or_else(|| data_err(path, format!("row {row}, column {}: bad value {:?}", c + 1, &record[c])))?;
            columns.push(v);
        }
    }
    let t = timestamps.len();
    let mut values = Matrix::zeros(n, t);
    for s in 0..t {
        for i in 0..n {
            values[(i, s)] = columns[s * n + i];
        }
    }
    Ok(SeriesTable {
        timestamps,
        node_ids,
        values,
    })
}

/// Long rows may come in any order; nodes keep their first-seen order and
/// absent `(timestamp, node)` pairs are missing.
pub fn read_long(path: &Path) -> Result<SeriesTable> {
    let mut reader = open(path)?;
    let mut node_ids: Vec<String> = Vec::new();
    let mut node_pos: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(i64, usize, f64)> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| data_err(path, format!("row {row}: {e}")))?;
        if record.len() != 3 {
            return Err(data_err(path, format!("row {row}: expected timestamp,node,value")));
        }
        let ts = parse_timestamp(&record[0])
            .ok_or_else(|| data_err(path, format!("row {row}, column 1: bad timestamp {:?}", &record[0])))?;
        let node = record[1].to_string();
        let idx = *node_pos.entry(node.clone()).or_insert_with(|| {
            node_ids.push(node);
            node_ids.len() - 1
        });
        let v = parse_value(&record[2])
            .ok_or_else(|| data_err(path, format!("row {row}, column 3: bad value {:?}", &record[2])))?;
        rows.push((ts, idx, v));
    }
    let mut timestamps: Vec<i64> = rows.iter().map(|r| r.0).collect();
    timestamps.sort_unstable();
    timestamps.dedup();
    let col: HashMap<i64, usize> = timestamps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut values = Matrix::filled(node_ids.len(), timestamps.len(), f64::NAN);
    for (ts, node, v) in rows {
        values[(node, col[&ts])] = v;
    }
    Ok(SeriesTable {
        timestamps,
        node_ids,
        values,
    })
}

fn node_index(node_ids: &[String]) -> HashMap<&str, usize> {
    node_ids.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
}

/// `node_a,node_b,distance` rows into an `N × N` matrix. Unlisted pairs are
/// infinitely far apart; a pair listed in one direction only is mirrored.
pub fn read_distances(path: &Path, node_ids: &[String]) -> Result<Matrix> {
    let index = node_index(node_ids);
    let n = node_ids.len();
    let mut d = Matrix::filled(n, n, f64::INFINITY);
    let mut given = vec![false; n * n];
    let mut reader = open(path)?;
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| data_err(path, format!("row {row}: {e}")))?;
        if record.len() != 3 {
            return Err(data_err(path, format!("row {row}: expected node_a,node_b,distance")));
        }
        let lookup = |c: usize| {
            index
                .get(&record[c])
                .copied()
                .ok_or_else(|| data_err(path, format!("row {row}, column {}: unknown node {:?}", c + 1, &record[c])))
        };
        let (a, b) = (lookup(0)?, lookup(1)?);
        let dist: f64 = record[2]
            .parse()
            .ok()
            .filter(|v: &f64| *v >= 0.0)
            .ok_or_else(|| data_err(path, format!("row {row}, column 3: bad distance {:?}", &record[2])))?;
        d[(a, b)] = dist;
        given[a * n + b] = true;
    }
    for a in 0..n {
        d[(a, a)] = 0.0;
        for b in 0..n {
            if !given[a * n + b] && given[b * n + a] {
                d[(a, b)] = d[(b, a)];
            }
        }
    }
    Ok(d)
}

/// `node_id,x,y` rows into an `N × 2` matrix in node order.
pub fn read_coordinates(path: &Path, node_ids: &[String]) -> Result<Matrix> {
    let index = node_index(node_ids);
    let mut coords = Matrix::filled(node_ids.len(), 2, f64::NAN);
    let mut reader = open(path)?;
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| data_err(path, format!("row {row}: {e}")))?;
        if record.len() != 3 {
            return Err(data_err(path, format!("row {row}: expected node_id,x,y")));
        }
        let Some(&i) = index.get(&record[0]) else {
            return Err(data_err(path, format!("row {row}, column 1: unknown node {:?}", &record[0])));
        };
        for c in 0..2 {
            coords[(i, c)] = record[c + 1]
                .parse()
                .map_err(|_| data_err(path, format!("row {row}, column {}: bad coordinate", c + 2)))?;
        }
    }
    if let Some(i) = (0..node_ids.len()).find(|&i| coords[(i, 0)].is_nan()) {
        return Err(data_err(path, format!("no coordinates for node {:?}", node_ids[i])));
    }
    Ok(coords)
}

pub fn write_wide(path: &Path, timestamps: &[i64], node_ids: &[String], values: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(node_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (s, &ts) in timestamps.iter().enumerate() {
        let mut rec = vec![format_timestamp(ts)];
        rec.extend((0..node_ids.len()).map(|i| values[(i, s)].to_string()));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_matrix(path: &Path, node_ids: &[String], m: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["node".to_string()];
    header.extend(node_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (i, id) in node_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(m.row(i).iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn csv_io(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other:?}", path.display())),
    }
}
