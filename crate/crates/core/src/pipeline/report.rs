use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::calibrate::CalibrationSummary;
use super::evaluate::Aggregate;
use crate::error::{Error, Result};
use crate::fidelity::{read_records_csv, CsvRow};
use crate::numerics::io::read_file;

pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "calibrate.json";

/// One output directory read back for reporting.
#[derive(Debug, Clone)]
pub enum ReportInput {
    Evaluation { aggregate: Aggregate, rows: Vec<CsvRow> },
    Calibration(CalibrationSummary),
}

impl ReportInput {
    /// Reads an evaluation (`aggregate.json` + `records.csv`) or a
    /// calibration (`calibrate.json`) output directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let json = |name: &str| -> Result<Vec<u8>> { read_file(&dir.join(name)) };
        if dir.join(AGGREGATE_FILE).exists() {
            let aggregate = serde_json::from_slice(&json(AGGREGATE_FILE)?)
                .map_err(|e| Error::format(format!("{}: {e}", dir.join(AGGREGATE_FILE).display())))?;
            let rows = read_records_csv(&dir.join(RECORDS_FILE))?;
            Ok(ReportInput::Evaluation { aggregate, rows })
        } else if dir.join(SUMMARY_FILE).exists() {
            let s = serde_json::from_slice(&json(SUMMARY_FILE)?)
                .map_err(|e| Error::format(format!("{}: {e}", dir.join(SUMMARY_FILE).display())))?;
            Ok(ReportInput::Calibration(s))
        } else {
            Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no evaluation or calibration output"),
            ))
        }
    }

    pub fn config_hash(&self) -> &str {
        match self {
            ReportInput::Evaluation { aggregate, .. } => &aggregate.config_hash,
            ReportInput::Calibration(s) => &s.config_hash,
        }
    }
}

/// Empirical CDF sample `P(D <= epsilon) = fraction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub sut: String,
    pub variant: String,
    pub split: String,
    pub metric: String,
    pub epsilon: f64,
    pub fraction: f64,
}

/// One point per distinct value, ending at fraction 1 at the maximum.
pub fn cdf_points(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = f,
            _ => out.push((*x, f)),
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Report {
    pub text: String,
    pub cdf: Vec<CdfPoint>,
}

impl Report {
    pub fn cdf_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.cdf {
            w.serialize(p).map_err(|e| Error::format(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::format(e.to_string()))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Plain-text tables and CDF samples over one or more outputs that share a
/// config hash.
pub fn render_report(inputs: &[ReportInput]) -> Result<Report> {
    let first = inputs.first().ok_or_else(|| Error::config("report needs at least one input"))?;
    let hashes: BTreeSet<&str> = inputs.iter().map(|i| i.config_hash()).collect();
    if hashes.len() > 1 {
        return Err(Error::config(format!(
            "inputs come from different configurations ({}); rerun them with one config",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut t = String::new();
    writeln!(t, "mfid {} report, config {}", crate::VERSION, first.config_hash()).unwrap();

    let evals: Vec<(&Aggregate, &Vec<CsvRow>)> = inputs
        .iter()
        .filter_map(|i| match i {
            ReportInput::Evaluation { aggregate, rows } => Some((aggregate, rows)),
            _ => None,
        })
        .collect();
    let cals: Vec<&CalibrationSummary> = inputs
        .iter()
        .filter_map(|i| match i {
            ReportInput::Calibration(s) => Some(s),
            _ => None,
        })
        .collect();

    let mut cdf = vec![];
    if !evals.is_empty() {
        writeln!(t, "\nThresholds and pass-rates").unwrap();
        writeln!(t, "sut\tvariant\tsplit\tn\teps_dff\tprovenance\tiv\tov\tdff\toverall").unwrap();
        for (a, _) in &evals {
            for (split, pr) in &a.pass_rates {
                writeln!(
                    t,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    a.sut,
                    a.variant,
                    split,
                    pr.n,
                    a.thresholds.eps_dff,
                    a.thresholds.provenance,
                    pr.iv,
                    pr.ov,
                    pr.dff,
                    pr.overall
                )
                .unwrap();
            }
        }
        if evals.iter().any(|(a, _)| !a.percentile_thresholds.is_empty()) {
            writeln!(t, "\nPercentile DFF thresholds").unwrap();
            writeln!(t, "sut\tvariant\tpercentile\teps_dff\tcalibration\theldout").unwrap();
            for (a, _) in &evals {
                for row in &a.percentile_thresholds {
                    let rate = |s: &str| opt(row.pass_rates.get(s).copied());
                    writeln!(
                        t,
                        "{}\t{}\t{}\t{}\t{}\t{}",
                        a.sut,
                        a.variant,
                        row.p,
                        row.eps_dff,
                        rate("calibration"),
                        rate("heldout")
                    )
                    .unwrap();
                }
            }
        }
        writeln!(t, "\nHeld-out rank correlations").unwrap();
        writeln!(t, "sut\tvariant\tmetrics\tn\trho\tci_low\tci_high").unwrap();
        for (a, _) in &evals {
            for (k, c) in &a.spearman {
                writeln!(t, "{}\t{}\t{}\t{}\t{}\t{}\t{}", a.sut, a.variant, k, c.n, c.rho, c.ci_low, c.ci_high)
                    .unwrap();
            }
        }
        for (a, rows) in &evals {
            for (split, ids) in &a.splits {
                let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
                let sel: Vec<&CsvRow> = rows.iter().filter(|r| ids.contains(r.pair_id.as_str())).collect();
                if sel.is_empty() {
                    continue;
                }
                let metrics: [(&str, Vec<f64>); 3] = [
                    ("dff", sel.iter().map(|r| r.dff).collect()),
                    ("iv_distance", sel.iter().map(|r| r.iv_distance).collect()),
                    ("ov_distance", sel.iter().map(|r| 1.0 - r.ov_score).collect()),
                ];
                for (m, vals) in metrics {
                    for (epsilon, fraction) in cdf_points(&vals) {
                        cdf.push(CdfPoint {
                            sut: a.sut.clone(),
                            variant: a.variant.to_string(),
                            split: split.clone(),
                            metric: m.to_string(),
                            epsilon,
                            fraction,
                        });
                    }
                }
            }
        }
    }

    if !cals.is_empty() {
        writeln!(t, "\nHeld-out calibration effects (calibrated - baseline)").unwrap();
        writeln!(t, "sut\tvariant\tn\tdelta_iv\tdelta_ov\tdelta_dff\tni_low\tni_margin\tni_pass\tdecoy_dff").unwrap();
        for s in &cals {
            let h = &s.heldout;
            let (low, margin, pass) = match &s.ni_ov {
                Some(ni) => (ni.ci_low_one_sided.to_string(), ni.margin.to_string(), ni.pass.to_string()),
                None => ("-".into(), "-".into(), "-".into()),
            };
            writeln!(
                t,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.sut,
                s.variant,
                h.n,
                h.delta_iv,
                h.delta_ov,
                h.delta_dff,
                low,
                margin,
                pass,
                opt(s.decoy.map(|d| d.calibrated_dff))
            )
            .unwrap();
        }
    }
    Ok(Report { text: t, cdf })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_is_monotone_and_complete() {
        let pts = cdf_points(&[0.3, 0.1, 0.1, 0.7, 0.2]);
        assert_eq!(pts, vec![(0.1, 0.4), (0.2, 0.6), (0.3, 0.8), (0.7, 1.0)]);
        assert!(cdf_points(&[]).is_empty());
    }
}
