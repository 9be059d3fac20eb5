//! Tabular series: first column an ISO-8601 timestamp, one column per node.

use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use crate::data::GraphSignalSeries;
use crate::error::{Error, Result};

const NAIVE_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Parses an ISO-8601 timestamp into epoch seconds. Timestamps without an
/// offset are taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return u64::try_from(dt.timestamp()).ok();
    }
    NAIVE_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .and_then(|dt| u64::try_from(dt.and_utc().timestamp()).ok())
}

/// Loads a series. Empty cells are read as 0.0 (missing). Reported rows are
/// 1-based file lines, columns are 1-based.
pub fn load_csv(path: impl AsRef<Path>) -> Result<GraphSignalSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv(reader: impl std::io::Read) -> Result<GraphSignalSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: 1,
            reason: e.to_string(),
        })?
        .clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            column: 2,
            reason: "need a timestamp column and at least one node column".into(),
        });
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let n = node_ids.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 1,
            reason: e.to_string(),
        })?;
        if rec.len() != n + 1 {
            return Err(Error::Parse {
                row,
                column: rec.len().min(n + 1),
                reason: format!("expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Parse {
            row,
            column: 1,
            reason: format!("bad timestamp {:?}", &rec[0]),
        })?;
        timestamps.push(ts);
        for (c, cell) in rec.iter().enumerate().skip(1) {
            let v = if cell.is_empty() {
                0.0
            } else {
                cell.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        column: c + 1,
                        reason: format!("non-numeric cell {cell:?}"),
                    })?
            };
            values.push(v);
        }
    }
    if timestamps.len() < 2 {
        return Err(Error::Parse {
            row: timestamps.len() + 2,
            column: 1,
            reason: "need at least two rows to infer the interval".into(),
        });
    }
    let step = timestamps[1] as i64 - timestamps[0] as i64;
    if step <= 0 || step % 60 != 0 {
        return Err(Error::NonUniformInterval {
            row: 3,
            expected: 60,
            found: step,
        });
    }
    for (i, w) in timestamps.windows(2).enumerate() {
        let found = w[1] as i64 - w[0] as i64;
        if found != step {
            return Err(Error::NonUniformInterval {
                row: i + 3,
                expected: step,
                found,
            });
        }
    }
    let interval = u32::try_from(step / 60).map_err(|_| Error::config("interval_minutes", "too large"))?;
    GraphSignalSeries::new(values, timestamps, node_ids, interval)
}

/// Writes a series in the format read by [`load_csv`]; missing values are
/// written as empty cells.
pub fn write_csv(series: &GraphSignalSeries, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Parse {
        row: 0,
        column: 0,
        reason: e.to_string(),
    };
    let mut header = vec!["timestamp".to_string()];
    header.extend(series.node_ids().iter().cloned());
    w.write_record(&header).map_err(to_err)?;
    for t in 0..series.len() {
        let ts = DateTime::from_timestamp(series.timestamps()[t] as i64, 0)
            .map(|d| d.format("%Y-%m-%dT%H:%M:%S").to_string())
            .unwrap_or_default();
        let mut rec = vec![ts];
        for n in 0..series.n_nodes() {
            let v = series.value(t, n);
            rec.push(if v == 0.0 { String::new() } else { v.to_string() });
        }
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
