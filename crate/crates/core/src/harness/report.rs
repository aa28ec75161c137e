// SPDX-License-Identifier: Apache-2.0

//! Report rows, the CSV writer and the JSON summary.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SndError};
use crate::privacy::Eta;

pub const CSV_HEADER: &str = "scenario,method,eta,seed,metric,value";

/// Closed set of metric names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Acc,
    Auc,
    Mse,
    Cos,
    Mi,
    AttackAcc,
    BytesUp,
    BytesDown,
    WallMs,
    KnnDist,
    PerturbDist,
    Rho,
}

impl Metric {
    pub const ALL: [Metric; 12] = [
        Metric::Acc,
        Metric::Auc,
        Metric::Mse,
        Metric::Cos,
        Metric::Mi,
        Metric::AttackAcc,
        Metric::BytesUp,
        Metric::BytesDown,
        Metric::WallMs,
        Metric::KnnDist,
        Metric::PerturbDist,
        Metric::Rho,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::Auc => "auc",
            Metric::Mse => "mse",
            Metric::Cos => "cos",
            Metric::Mi => "mi",
            Metric::AttackAcc => "attack_acc",
            Metric::BytesUp => "bytes_up",
            Metric::BytesDown => "bytes_down",
            Metric::WallMs => "wall_ms",
            Metric::KnnDist => "knn_dist",
            Metric::PerturbDist => "perturb_dist",
            Metric::Rho => "rho",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = SndError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SndError::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub method: String,
    pub eta: Eta,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
}

impl ReportRow {
    pub fn new(scenario: &str, method: &str, eta: Eta, seed: u64, metric: Metric, value: f64) -> Self {
        Self {
            scenario: scenario.to_string(),
            method: method.to_string(),
            eta,
            seed,
            metric,
            value,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.scenario, self.method, self.eta, self.seed, self.metric, self.value
        )
    }

    /// Parses one CSV data line, validating the metric name.
    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(SndError::Config(format!("expected 6 fields in `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| SndError::Config(format!("bad number `{s}`")));
        Ok(Self {
            scenario: f[0].to_string(),
            method: f[1].to_string(),
            eta: f[2].parse()?,
            seed: f[3].parse().map_err(|_| SndError::Config(format!("bad seed `{}`", f[3])))?,
            metric: f[4].parse()?,
            value: num(f[5])?,
        })
    }
}

/// Header plus one line per row; always ends with a newline.
pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(SndError::Config("missing or wrong CSV header".into()));
    }
    lines.map(ReportRow::parse_csv_line).collect()
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    eta: String,
    seed: u64,
    metric: &'a str,
    value: f64,
}

#[derive(Debug, Clone, Serialize)]
struct MetricSummary {
    mean: f64,
    count: usize,
}

/// JSON summary: rows grouped by scenario, plus per-(method, eta, metric)
/// means over seeds.
pub fn to_json_summary(rows: &[ReportRow]) -> String {
    let mut grouped: BTreeMap<&str, Vec<SummaryRow>> = BTreeMap::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        grouped.entry(&r.scenario).or_default().push(SummaryRow {
            method: &r.method,
            eta: r.eta.to_string(),
            seed: r.seed,
            metric: r.metric.as_str(),
            value: r.value,
        });
        let key = format!("{}/{}/{}/{}", r.scenario, r.method, r.eta, r.metric);
        let e = sums.entry(key).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    let means: BTreeMap<String, MetricSummary> = sums
        .into_iter()
        .map(|(k, (s, c))| (k, MetricSummary { mean: s / c as f64, count: c }))
        .collect();
    let doc = serde_json::json!({ "scenarios": grouped, "means": means, "row_count": rows.len() });
    let mut text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    text.push('\n');
    text
}

/// Writes `<path>` (CSV) and the JSON summary next to it.
pub fn write_reports(rows: &[ReportRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_csv(rows))?;
    std::fs::write(path.with_extension("json"), to_json_summary(rows))?;
    Ok(())
}
