//! Plain-text report format.
//!
//! ```text
//! # mixcast evaluation report v1
//! [meta]
//! variant = gmm
//! [summary]
//! crps = 1.23
//! maw = n/a
//! [per_horizon]
//! step,crps,maw,mcce
//! 1,1.1,n/a,n/a
//! [calibration]
//! level,coverage,width
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so parsing a written
//! report reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use super::{CalibrationPoint, EvaluationReport, HorizonStats};

pub const REPORT_HEADER: &str = "# mixcast evaluation report v1";
/// Marker for metrics that do not apply (interval metrics of point forecasts).
pub const NOT_APPLICABLE: &str = "n/a";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportParseError {
    #[error("missing report header")]
    Header,
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing field `{0}`")]
    Missing(String),
    #[error("field `{field}`: cannot parse `{value}`")]
    Value { field: String, value: String },
}

/// Raw sections of a report file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSections {
    pub meta: BTreeMap<String, String>,
    pub summary: BTreeMap<String, String>,
    pub tables: BTreeMap<String, Vec<Vec<String>>>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NOT_APPLICABLE.to_string(), |x| x.to_string())
}

impl EvaluationReport {
    pub fn to_text(&self, meta: &BTreeMap<String, String>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "[meta]");
        for (k, v) in meta {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "[summary]");
        let _ = writeln!(s, "elements = {}", self.elements);
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "crps = {}", self.crps_mean);
        let _ = writeln!(s, "maw = {}", opt(self.maw));
        let _ = writeln!(s, "mcce = {}", opt(self.mcce));
        let _ = writeln!(s, "mae = {}", self.mae);
        let _ = writeln!(s, "mape = {}", opt(self.mape));
        let _ = writeln!(s, "rmse = {}", self.rmse);
        let _ = writeln!(s, "clipped_grids = {}", self.clipped_grids);
        let _ = writeln!(s, "[per_horizon]");
        let _ = writeln!(s, "step,crps,maw,mcce");
        for h in &self.per_horizon {
            let _ = writeln!(s, "{},{},{},{}", h.step, h.crps, opt(h.maw), opt(h.mcce));
        }
        let _ = writeln!(s, "[calibration]");
        let _ = writeln!(s, "level,coverage,width");
        for p in &self.calibration_curve {
            let _ = writeln!(s, "{},{},{}", p.level, p.coverage, p.width);
        }
        s
    }

    /// Parses text written by [`to_text`](Self::to_text); returns the meta
    /// entries alongside the report.
    pub fn from_text(text: &str) -> Result<(BTreeMap<String, String>, Self), ReportParseError> {
        let sections = ReportSections::parse(text)?;
        let report = Self::from_sections(&sections)?;
        Ok((sections.meta, report))
    }

    fn from_sections(s: &ReportSections) -> Result<Self, ReportParseError> {
        let per_horizon = s
            .table("per_horizon")?
            .iter()
            .map(|row| {
                Ok(HorizonStats {
                    step: cell(row, 0, "step")?,
                    crps: cell(row, 1, "crps")?,
                    maw: opt_cell(row, 2, "maw")?,
                    mcce: opt_cell(row, 3, "mcce")?,
                })
            })
            .collect::<Result<_, ReportParseError>>()?;
        let calibration_curve = s
            .table("calibration")?
            .iter()
            .map(|row| {
                Ok(CalibrationPoint {
                    level: cell(row, 0, "level")?,
                    coverage: cell(row, 1, "coverage")?,
                    width: cell(row, 2, "width")?,
                })
            })
            .collect::<Result<_, ReportParseError>>()?;
        Ok(Self {
            elements: s.get("elements")?,
            horizon: s.get("horizon")?,
            crps_mean: s.get("crps")?,
            maw: s.get_opt("maw")?,
            mcce: s.get_opt("mcce")?,
            per_horizon,
            calibration_curve,
            mae: s.get("mae")?,
            mape: s.get_opt("mape")?,
            rmse: s.get("rmse")?,
            clipped_grids: s.get("clipped_grids")?,
        })
    }
}

fn parse_value<T: FromStr>(field: &str, value: &str) -> Result<T, ReportParseError> {
    value.parse().map_err(|_| ReportParseError::Value {
        field: field.to_string(),
        value: value.to_string(),
    })
}

fn cell<T: FromStr>(row: &[String], i: usize, field: &str) -> Result<T, ReportParseError> {
    let v = row
        .get(i)
        .ok_or_else(|| ReportParseError::Missing(field.to_string()))?;
    parse_value(field, v)
}

fn opt_cell(row: &[String], i: usize, field: &str) -> Result<Option<f64>, ReportParseError> {
    match row.get(i).map(String::as_str) {
        Some(NOT_APPLICABLE) => Ok(None),
        _ => cell(row, i, field).map(Some),
    }
}

impl ReportSections {
    pub fn parse(text: &str) -> Result<Self, ReportParseError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == REPORT_HEADER => {}
            _ => return Err(ReportParseError::Header),
        }
        let mut out = Self::default();
        let mut section = String::new();
        let mut table_header_seen = false;
        for (idx, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                table_header_seen = false;
                continue;
            }
            match section.as_str() {
                "meta" | "summary" => {
                    let (k, v) = line.split_once('=').ok_or_else(|| ReportParseError::Syntax {
                        line: idx + 1,
                        msg: "expected `key = value`".into(),
                    })?;
                    let map = if section == "meta" {
                        &mut out.meta
                    } else {
                        &mut out.summary
                    };
                    map.insert(k.trim().to_string(), v.trim().to_string());
                }
                "" => {
                    return Err(ReportParseError::Syntax {
                        line: idx + 1,
                        msg: "content before first section".into(),
                    })
                }
                table => {
                    let rows = out.tables.entry(table.to_string()).or_default();
                    if !table_header_seen {
                        table_header_seen = true;
                        continue;
                    }
                    rows.push(line.split(',').map(|c| c.trim().to_string()).collect());
                }
            }
        }
        Ok(out)
    }

    fn raw(&self, key: &str) -> Result<&str, ReportParseError> {
        self.summary
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ReportParseError::Missing(key.to_string()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ReportParseError> {
        parse_value(key, self.raw(key)?)
    }

    pub fn get_opt(&self, key: &str) -> Result<Option<f64>, ReportParseError> {
        match self.raw(key)? {
            NOT_APPLICABLE => Ok(None),
            v => parse_value(key, v).map(Some),
        }
    }

    pub fn table(&self, name: &str) -> Result<&[Vec<String>], ReportParseError> {
        self.tables
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| ReportParseError::Missing(name.to_string()))
    }
}
