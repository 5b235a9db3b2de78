//! Audit reports as newline-delimited JSON: one row per check, then one
//! summary line.

use std::io::Write;

use geomformer_core::verify::{CheckRow, SymmetryReport};
use serde::Serialize;

#[derive(Serialize)]
struct Row<'a> {
    check: &'a str,
    trials: usize,
    /// `null` when the deviation is NaN.
    max_deviation: Option<f64>,
    tolerance: f64,
    passed: bool,
    seed: u64,
    config_hash: String,
}

#[derive(Serialize)]
struct Summary {
    summary: bool,
    passed: bool,
    checks: usize,
    failed: Vec<String>,
}

pub fn failed_rows(reports: &[SymmetryReport]) -> Vec<&CheckRow> {
    reports.iter().flat_map(|r| &r.rows).filter(|r| !r.passed).collect()
}

pub fn write_report(reports: &[SymmetryReport], mut out: impl Write) -> std::io::Result<()> {
    let mut checks = 0;
    for rep in reports {
        for row in &rep.rows {
            checks += 1;
            let line = Row {
                check: &row.name,
                trials: row.trials,
                max_deviation: (!row.max_deviation.is_nan()).then_some(row.max_deviation),
                tolerance: row.tolerance,
                passed: row.passed,
                seed: rep.seed,
                config_hash: format!("{:016x}", rep.config_hash),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    let failed: Vec<String> = failed_rows(reports).iter().map(|r| r.name.clone()).collect();
    let summary = Summary {
        summary: true,
        passed: failed.is_empty(),
        checks,
        failed,
    };
    serde_json::to_writer(&mut out, &summary)?;
    out.write_all(b"\n")?;
    out.flush()
}
