//! Per-sequence, per-QP quality tables (`results.csv`, `results.json`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};

/// One table row. Improvements are derived on emit, never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub sequence: String,
    pub qp: i32,
    #[serde(default, with = "db")]
    pub psnr2d_noisy: Option<f64>,
    #[serde(default, with = "db")]
    pub psnr2d_enhanced: Option<f64>,
    #[serde(default, with = "db")]
    pub psnr3d_input: Option<f64>,
    #[serde(default, with = "db")]
    pub psnr3d_output: Option<f64>,
}

/// dB values: finite numbers as JSON numbers, +∞ as the string `"inf"`.
mod db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match Option::<Value>::deserialize(d)? {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => Ok(n.as_f64()),
            Some(Value::String(s)) if s == "inf" => Ok(Some(f64::INFINITY)),
            Some(other) => Err(serde::de::Error::custom(format!("expected dB value, got {other}"))),
        }
    }
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn fmt_db(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{:.4}", round4(x)),
    }
}

/// Difference of the values as they are emitted (4 decimals).
fn improvement(before: Option<f64>, after: Option<f64>) -> Option<f64> {
    match (before, after) {
        (Some(a), Some(b)) if a.is_finite() && b.is_finite() => Some(round4(round4(b) - round4(a))),
        (Some(a), Some(b)) if a.is_finite() && b.is_infinite() => Some(f64::INFINITY),
        _ => None,
    }
}

impl QualityRow {
    pub fn improvement_2d(&self) -> Option<f64> {
        improvement(self.psnr2d_noisy, self.psnr2d_enhanced)
    }

    pub fn improvement_3d(&self) -> Option<f64> {
        improvement(self.psnr3d_input, self.psnr3d_output)
    }
}

pub const CSV_HEADER: &str =
    "sequence,qp,psnr2d_noisy,psnr2d_enhanced,improvement2d,psnr3d_input,psnr3d_output,improvement3d";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub csv: String,
    pub json: String,
}

/// Renders rows as CSV and JSON, sorted by sequence then descending QP.
pub fn make_report(rows: &[QualityRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::contract("metrics", "report needs at least one row"));
    }
    let mut sorted: Vec<&QualityRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.sequence.cmp(&b.sequence).then(b.qp.cmp(&a.qp)));
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut json_rows = Vec::with_capacity(rows.len());
    for r in sorted {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.sequence,
            r.qp,
            fmt_db(r.psnr2d_noisy),
            fmt_db(r.psnr2d_enhanced),
            fmt_db(r.improvement_2d()),
            fmt_db(r.psnr3d_input),
            fmt_db(r.psnr3d_output),
            fmt_db(r.improvement_3d()),
        )
        .unwrap();
        let mut v = serde_json::to_value(r)?;
        let obj = v.as_object_mut().expect("row serializes to an object");
        for (key, val) in [("improvement2d", r.improvement_2d()), ("improvement3d", r.improvement_3d())] {
            obj.insert(key.into(), db_value(val));
        }
        json_rows.push(v);
    }
    let json = serde_json::to_string_pretty(&json_rows)? + "\n";
    Ok(Report { csv, json })
}

fn db_value(v: Option<f64>) -> Value {
    match v {
        None => Value::Null,
        Some(x) if x.is_infinite() => Value::String("inf".into()),
        Some(x) => serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null),
    }
}

/// Writes `results.csv` and `results.json` into `dir`.
pub fn write_report(rows: &[QualityRow], dir: &Path) -> Result<Report> {
    let report = make_report(rows)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [("results.csv", &report.csv), ("results.json", &report.json)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

/// Reads rows from JSON; extra (derived) fields are ignored.
pub fn read_rows(path: &Path) -> Result<Vec<QualityRow>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
