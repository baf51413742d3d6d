//! Sensor record streams and their CSV encoding.
//!
//! Header: `t,ch00,ch01,...,chNN,label`. `t` is seconds, channel values are
//! decimal reals and `label` is a two-letter posture code (empty when the
//! record is unlabeled). Default channel order is five placements (head,
//! chest, arm, thigh, calf), each contributing accelerometer x,y,z followed
//! by gyroscope x,y,z.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::label::PostureLabel;
use crate::error::{Error, Result};

pub const DEFAULT_CHANNELS: usize = 30;

pub const PLACEMENTS: [&str; 5] = ["head", "chest", "arm", "thigh", "calf"];

#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecord {
    pub t: f64,
    pub values: Vec<f64>,
    pub label: Option<PostureLabel>,
}

pub fn csv_header(channels: usize) -> String {
    let mut h = String::from("t");
    for c in 0..channels {
        let _ = write!(h, ",ch{c:02}");
    }
    h.push_str(",label");
    h
}

pub fn write_csv<W: Write>(mut out: W, records: &[SensorRecord]) -> std::io::Result<()> {
    let channels = records.first().map_or(DEFAULT_CHANNELS, |r| r.values.len());
    writeln!(out, "{}", csv_header(channels))?;
    let mut line = String::new();
    for r in records {
        line.clear();
        let _ = write!(line, "{}", r.t);
        for v in &r.values {
            let _ = write!(line, ",{v}");
        }
        line.push(',');
        if let Some(l) = r.label {
            line.push_str(l.code());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a stream CSV. Errors carry the 1-based line number.
pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<SensorRecord>> {
    let mut lines = input.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty file".into() })?;
    let header = header.map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "t" {
        return Err(Error::Parse { line: 1, message: "header must start with `t`".into() });
    }
    if cols[cols.len() - 1] != "label" {
        return Err(Error::Parse { line: 1, message: "missing `label` column".into() });
    }
    let channels = cols.len() - 2;
    for (i, c) in cols[1..=channels].iter().enumerate() {
        if *c != format!("ch{i:02}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column ch{i:02}, found {c:?}"),
            });
        }
    }

    let mut records = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != channels + 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", channels + 2, fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { line: lineno, message: format!("bad number {s:?}") })
        };
        let t = num(fields[0])?;
        if t <= last_t {
            return Err(Error::Parse {
                line: lineno,
                message: "timestamps must be strictly increasing".into(),
            });
        }
        last_t = t;
        let values = fields[1..=channels].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let raw = fields[channels + 1];
        let label = if raw.is_empty() {
            None
        } else {
            Some(raw.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("unknown label {raw:?}"),
            })?)
        };
        records.push(SensorRecord { t, values, label });
    }
    Ok(records)
}
