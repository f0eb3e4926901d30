//! Replicate-level performance summaries.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::estimators::{Estimand, Estimator};
use crate::records::{EstimateRecord, Z_95};
use crate::truth::{Flavor, TruthValue};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("records mix {0}")]
    Mixed(&'static str),
    #[error("truth is for {truth}, records for {records}")]
    TruthMismatch { truth: String, records: String },
    #[error("no records")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub estimator: Estimator,
    pub estimand: Estimand,
    pub flavor: Flavor,
    pub truth: f64,
    pub replicates: usize,
    pub converged: usize,
    pub median_bias: Option<f64>,
    pub median_pct_bias: Option<f64>,
    pub mean_bias: Option<f64>,
    pub ese: Option<f64>,
    pub mad: Option<f64>,
    pub rrmse: Option<f64>,
    pub nominal_coverage: Option<f64>,
    pub oracle_coverage: Option<f64>,
    pub convergence_rate: f64,
}

/// Median of a sorted slice.
fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

/// Median absolute deviation, without a consistency factor.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    median(&values.iter().map(|v| (v - m).abs()).collect::<Vec<_>>())
}

/// Metrics over converged records. `truth` must match the records'
/// estimand; its scenario is the truth id, which must prefix the records'
/// scenario.
pub fn summarize(records: &[EstimateRecord], truth: &TruthValue) -> Result<SummaryRow, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    if records.iter().any(|r| r.estimator != first.estimator) {
        return Err(MetricsError::Mixed("estimators"));
    }
    if records.iter().any(|r| r.estimand != first.estimand) {
        return Err(MetricsError::Mixed("estimands"));
    }
    if records.iter().any(|r| r.scenario != first.scenario) {
        return Err(MetricsError::Mixed("scenarios"));
    }
    if truth.estimand != first.estimand || !truth_matches(&truth.scenario, &first.scenario) {
        return Err(MetricsError::TruthMismatch {
            truth: format!("{} {}", truth.scenario, truth.estimand),
            records: format!("{} {}", first.scenario, first.estimand),
        });
    }
    // Sorted so that sums do not depend on record order.
    let mut ok: Vec<&EstimateRecord> = records.iter().filter(|r| r.converged && r.point.is_some()).collect();
    ok.sort_by(|a, b| a.point.unwrap().total_cmp(&b.point.unwrap()).then(a.replicate.cmp(&b.replicate)));
    let t = truth.value;
    let mut row = SummaryRow {
        scenario: first.scenario.clone(),
        estimator: first.estimator,
        estimand: first.estimand,
        flavor: truth.flavor,
        truth: t,
        replicates: records.len(),
        converged: ok.len(),
        median_bias: None,
        median_pct_bias: None,
        mean_bias: None,
        ese: None,
        mad: None,
        rrmse: None,
        nominal_coverage: None,
        oracle_coverage: None,
        convergence_rate: ok.len() as f64 / records.len() as f64,
    };
    if ok.is_empty() {
        return Ok(row);
    }
    let points: Vec<f64> = ok.iter().map(|r| r.point.unwrap()).collect();
    let k = points.len() as f64;
    let med = median_sorted(&points);
    let mean = points.iter().sum::<f64>() / k;
    let ese = if ok.len() > 1 { (points.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() } else { 0.0 };
    let m = mad(&points);
    let bias = med - t;
    row.median_bias = Some(bias);
    row.median_pct_bias = (t != 0.0).then(|| 100.0 * bias / t);
    row.mean_bias = Some(mean - t);
    row.ese = Some(ese);
    row.mad = Some(m);
    row.rrmse = Some((bias * bias + m * m).sqrt());
    row.nominal_coverage = Some(ok.iter().filter(|r| r.covers(t) == Some(true)).count() as f64 / k);
    row.oracle_coverage = (ok.len() > 1).then(|| points.iter().filter(|p| (*p - t).abs() <= Z_95 * ese).count() as f64 / k);
    Ok(row)
}

pub fn write_summaries<W: Write>(rows: &[SummaryRow], writer: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record([
            "scenario",
            "estimator",
            "estimand",
            "flavor",
            "truth",
            "replicates",
            "converged",
            "median_bias",
            "median_pct_bias",
            "mean_bias",
            "ese",
            "mad",
            "rrmse",
            "nominal_coverage",
            "oracle_coverage",
            "convergence_rate",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries<R: Read>(reader: R) -> Result<Vec<SummaryRow>, MetricsError> {
    let mut rd = csv::Reader::from_reader(reader);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

/// Summaries for every (scenario, estimator, estimand) group in `records`
/// that has a matching truth, in first-appearance order, one row per
/// matching flavor.
pub fn summarize_all(records: &[EstimateRecord], truths: &[TruthValue]) -> Result<Vec<SummaryRow>, MetricsError> {
    let mut keys: Vec<(String, Estimator, Estimand)> = Vec::new();
    for r in records {
        let k = (r.scenario.clone(), r.estimator, r.estimand);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (s, e, m) in keys {
        let group: Vec<EstimateRecord> =
            records.iter().filter(|r| r.scenario == s && r.estimator == e && r.estimand == m).cloned().collect();
        for flavor in Flavor::ALL {
            if let Some(t) = truths.iter().find(|t| t.estimand == m && t.flavor == flavor && truth_matches(&t.scenario, &s)) {
                out.push(summarize(&group, t)?);
            }
        }
    }
    Ok(out)
}

fn truth_matches(truth_id: &str, scenario: &str) -> bool {
    scenario == truth_id || scenario.strip_prefix(truth_id).is_some_and(|rest| rest.starts_with('/'))
}
