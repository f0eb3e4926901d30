//! Text report and SVG panels from summary rows.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::estimators::{Estimand, Estimator};
use crate::metrics::SummaryRow;
use crate::truth::Flavor;

/// `.95 ± 1.96·sqrt(.05·.95/reps)`.
pub fn coverage_band(reps: usize) -> (f64, f64) {
    let half = 1.96 * (0.05 * 0.95 / reps as f64).sqrt();
    (0.95 - half, 0.95 + half)
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

pub fn text_report(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return "no summaries\n".into();
    }
    let mut groups: Vec<(String, Estimand, Flavor)> = Vec::new();
    for r in rows {
        let k = (r.scenario.clone(), r.estimand, r.flavor);
        if !groups.contains(&k) {
            groups.push(k);
        }
    }
    for (s, e, f) in groups {
        let members: Vec<&SummaryRow> = rows.iter().filter(|r| r.scenario == s && r.estimand == e && r.flavor == f).collect();
        let reps = members.iter().map(|r| r.replicates).max().unwrap_or(0);
        let (lo, hi) = coverage_band(reps.max(1));
        let _ = writeln!(out, "{s}  {e} ({f}), truth {:.4}, {reps} replicates, coverage band [{lo:.3}, {hi:.3}]", members[0].truth);
        let _ = writeln!(
            out,
            "  {:<9} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}",
            "estimator", "med.bias", "%bias", "ESE", "MAD", "rRMSE", "nom.cov", "orc.cov", "conv"
        );
        for r in members {
            let _ = writeln!(
                out,
                "  {:<9} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6.3}",
                r.estimator.id(),
                cell(r.median_bias, 4),
                cell(r.median_pct_bias, 1),
                cell(r.ese, 4),
                cell(r.mad, 4),
                cell(r.rrmse, 4),
                cell(r.nominal_coverage, 3),
                cell(r.oracle_coverage, 3),
                r.convergence_rate
            );
        }
        out.push('\n');
    }
    out
}

const ROW_H: f64 = 18.0;
const PANEL_W: f64 = 220.0;
const LABEL_W: f64 = 190.0;
const TOP: f64 = 40.0;

struct Axis {
    lo: f64,
    hi: f64,
    x0: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, include: &[f64], x0: f64) -> Axis {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values.chain(include.iter().copied()).filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let pad = 0.05 * (hi - lo);
        Axis { lo: lo - pad, hi: hi + pad, x0 }
    }

    fn x(&self, v: f64) -> f64 {
        self.x0 + 10.0 + (PANEL_W - 20.0) * (v - self.lo) / (self.hi - self.lo)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One SVG with three panels (median %bias, rRMSE, coverage) for one
/// estimand and flavor. Rows are (scenario, estimator) pairs; missing
/// metrics leave gaps.
pub fn svg_panel(rows: &[&SummaryRow], estimand: Estimand, flavor: Flavor) -> String {
    let n = rows.len();
    let height = TOP + ROW_H * n as f64 + 30.0;
    let width = LABEL_W + 3.0 * PANEL_W + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="8" y="16" font-size="13">{estimand} ({flavor})</text>"#);
    let bias = Axis::new(rows.iter().filter_map(|r| r.median_pct_bias), &[0.0], LABEL_W);
    let rrmse = Axis::new(rows.iter().filter_map(|r| r.rrmse), &[0.0], LABEL_W + PANEL_W);
    let cov = Axis { lo: 0.0, hi: 1.0, x0: LABEL_W + 2.0 * PANEL_W };
    let bottom = TOP + ROW_H * n as f64;
    for (title, axis) in [("median % bias", &bias), ("rRMSE", &rrmse), ("coverage", &cov)] {
        let _ = writeln!(s, r#"<text x="{}" y="32">{title}</text>"#, axis.x0 + 10.0);
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            axis.x0 + 5.0,
            PANEL_W - 10.0,
            bottom - TOP
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{:.3}</text>"#, axis.x0 + 5.0, bottom + 14.0, axis.lo);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, axis.x0 + PANEL_W - 5.0, bottom + 14.0, axis.hi);
    }
    let zero = bias.x(0.0);
    let _ = writeln!(s, r##"<line x1="{zero}" y1="{TOP}" x2="{zero}" y2="{bottom}" stroke="#666" stroke-dasharray="3,3"/>"##);
    let reps = rows.iter().map(|r| r.replicates).max().unwrap_or(1).max(1);
    let (lo, hi) = coverage_band(reps);
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{TOP}" width="{}" height="{}" fill="#cde" opacity="0.6"/>"##,
        cov.x(lo),
        cov.x(hi) - cov.x(lo),
        bottom - TOP
    );
    let c95 = cov.x(0.95);
    let _ = writeln!(s, r##"<line x1="{c95}" y1="{TOP}" x2="{c95}" y2="{bottom}" stroke="#36c"/>"##);
    for (i, r) in rows.iter().enumerate() {
        let y = TOP + ROW_H * (i as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="8" y="{}">{} {}</text>"#, y + 4.0, escape(&r.scenario), r.estimator.id());
        if let Some(b) = r.median_pct_bias {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{y}" r="3.5" fill="black"/>"#, bias.x(b));
        }
        if let Some(v) = r.rrmse {
            let x0 = rrmse.x(0.0);
            let _ = writeln!(
                s,
                r##"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#888"/>"##,
                y - ROW_H * 0.35,
                (rrmse.x(v) - x0).max(0.0),
                ROW_H * 0.7
            );
        }
        if let Some(c) = r.nominal_coverage {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{y}" r="3.5" fill="black"/>"#, cov.x(c));
        }
        if let Some(c) = r.oracle_coverage {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{y}" r="3.5" fill="none" stroke="black"/>"#, cov.x(c));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.txt` and one `panel-<estimand>-<flavor>.svg` per
/// estimand and flavor present. Returns the written paths.
pub fn write_report(rows: &[SummaryRow], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let text = dir.join("report.txt");
    fs::write(&text, text_report(rows))?;
    written.push(text);
    for e in Estimand::ALL {
        for f in Flavor::ALL {
            let mut sel: Vec<&SummaryRow> = rows.iter().filter(|r| r.estimand == e && r.flavor == f).collect();
            if sel.is_empty() {
                continue;
            }
            sel.sort_by_key(|r| (r.scenario.clone(), Estimator::ALL.iter().position(|x| *x == r.estimator)));
            let path = dir.join(format!("panel-{}-{}.svg", e.id(), f.id()));
            fs::write(&path, svg_panel(&sel, e, f))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(est: Estimator, cov: Option<f64>) -> SummaryRow {
        SummaryRow {
            scenario: "X1/Y1.1/M1.1".into(),
            estimator: est,
            estimand: Estimand::Mrd,
            flavor: Flavor::Oracle,
            truth: 0.04,
            replicates: 300,
            converged: 300,
            median_bias: Some(0.001),
            median_pct_bias: Some(2.5),
            mean_bias: Some(0.001),
            ese: Some(0.02),
            mad: Some(0.013),
            rrmse: Some(0.013),
            nominal_coverage: cov,
            oracle_coverage: cov,
            convergence_rate: 1.0,
        }
    }

    #[test]
    fn band_matches_caption_values() {
        let (lo, hi) = coverage_band(2500);
        assert!((hi - 0.95 - 0.00854).abs() < 5e-6 && (0.95 - lo - 0.00854).abs() < 5e-6);
        let (lo, _) = coverage_band(1000);
        assert!((0.95 - lo - 0.01351).abs() < 5e-6);
    }

    #[test]
    fn empty_summary_gives_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&[], dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(fs::read_to_string(&files[0]).unwrap(), "no summaries\n");
    }

    #[test]
    fn gaps_for_missing_metrics() {
        let rows = [row(Estimator::Cc, Some(0.9)), row(Estimator::TMto, None)];
        let refs: Vec<&SummaryRow> = rows.iter().collect();
        let svg = svg_panel(&refs, Estimand::Mrd, Flavor::Oracle);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        // bias dots for both rows, coverage dots (nominal + oracle) for one
        assert_eq!(svg.matches("<circle").count(), 2 + 2);
        let text = text_report(&rows);
        assert!(text.contains("T-MTO") && text.contains(" - "));
    }
}
