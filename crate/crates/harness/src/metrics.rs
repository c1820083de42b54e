//! `metrics.csv`: one row per evaluation point, plus the
//! timesteps-to-threshold report built on it.

use std::path::Path;

use offoab_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: [&str; 6] = [
    "timestep",
    "eval_mean_return",
    "eval_std_return",
    "critic_loss",
    "mean_ratio",
    "ratio_clip_count",
];

/// `critic_loss` and `mean_ratio` average over the updates since the
/// previous row; they are NaN when there were none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub timestep: u64,
    #[serde(deserialize_with = "nan_if_null")]
    pub eval_mean_return: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub eval_std_return: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub critic_loss: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub mean_ratio: f64,
    pub ratio_clip_count: u64,
}

/// JSON has no NaN and writes it as `null`; read that back as NaN.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse { line: p.line() as usize, detail: e.to_string() },
        None => Error::Io(e.to_string()),
    }
}

pub fn metrics_to_string(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.timestep.to_string(),
            r.eval_mean_return.to_string(),
            r.eval_std_return.to_string(),
            r.critic_loss.to_string(),
            r.mean_ratio.to_string(),
            r.ratio_clip_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_to_string(rows)?)?;
    Ok(())
}

/// Parses metrics text; errors name the 1-based line.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Parse { line: 1, detail: format!("unexpected header {header:?}") });
    }
    let rows: Vec<MetricsRow> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
    for (k, w) in rows.windows(2).enumerate() {
        if w[1].timestep <= w[0].timestep {
            return Err(Error::Parse { line: k + 3, detail: "timesteps must increase".into() });
        }
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_metrics(&text).map_err(|e| match e {
        Error::Parse { line, detail } => Error::Parse { line, detail: format!("{}: {detail}", path.display()) },
        other => other,
    })
}

/// First evaluation timestep whose mean return is at least `threshold`.
pub fn first_crossing(rows: &[MetricsRow], threshold: f64) -> Option<u64> {
    rows.iter().find(|r| r.eval_mean_return >= threshold).map(|r| r.timestep)
}

pub const NOT_REACHED: &str = "not reached";

/// `(label, crossing)` per run, and a plain-text table of the same.
pub fn threshold_report(runs: &[(String, Vec<MetricsRow>)], threshold: f64) -> (Vec<(String, Option<u64>)>, String) {
    let hits: Vec<(String, Option<u64>)> =
        runs.iter().map(|(name, rows)| (name.clone(), first_crossing(rows, threshold))).collect();
    let width = hits.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);
    let mut table = format!("threshold {threshold}\n{:<width$}  timesteps\n", "run");
    for (name, hit) in &hits {
        let cell = hit.map_or(NOT_REACHED.to_string(), |t| t.to_string());
        table.push_str(&format!("{name:<width$}  {cell}\n"));
    }
    (hits, table)
}

/// Median of a slice; the mean of the middle pair for even lengths.
/// `None` entries (never reached) sort last.
pub fn median_steps(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.map_or(f64::INFINITY, |t| t as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some(m)
}
