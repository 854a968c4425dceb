//! Report emission: `summary.csv` with one row per grid cell, one
//! `estimates_<run>.csv` per run with true and estimated components, and a
//! `ledger_<run>.jsonl` step log per multiple-window run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use descriptor_mhe::{Error, Result};
use nalgebra::DVector;

use crate::bench::{BenchRow, BenchmarkReport, RunOutput};

/// Full-precision scientific notation, locale-free; `None` is an empty cell.
fn cell_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn cell_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The `summary.csv` text for a set of rows, header included.
pub fn summary_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,N,N_FC,mse,time_ms,time_reduction_pct,coupling_norm\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.method,
            cell_usize(row.n),
            cell_usize(row.n_fc),
            cell_f64(row.mse),
            cell_f64(row.time_ms),
            cell_f64(row.time_reduction_pct),
            cell_f64(row.coupling_norm),
        );
    }
    out
}

fn estimates_csv(run: &RunOutput, truth: &[DVector<f64>]) -> String {
    let n = truth.first().map_or(0, |x| x.len());
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",true_x{i}");
    }
    for i in 1..=n {
        let _ = write!(out, ",est_x{i}");
    }
    out.push('\n');
    for (idx, (x, e)) in truth.iter().zip(&run.estimates).enumerate() {
        let _ = write!(out, "{}", idx + 1);
        for v in x.iter().chain(e.iter()) {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Write one run's files into `dir` (created if missing): the estimate
/// series, plus the step ledger for multiple-window runs.
pub fn emit_run(run: &RunOutput, truth: &[DVector<f64>], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();

    let path = dir.join(format!("estimates_{}.csv", run.key));
    write_file(&path, &estimates_csv(run, truth))?;
    written.push(path);

    if run.key.starts_with("mwmhe") {
        let mut lines = String::new();
        for trace in &run.traces {
            let json =
                serde_json::to_string(trace).map_err(|e| Error::Io(format!("ledger row: {e}")))?;
            lines.push_str(&json);
            lines.push('\n');
        }
        let path = dir.join(format!("ledger_{}.jsonl", run.key));
        write_file(&path, &lines)?;
        written.push(path);
    }
    Ok(written)
}

/// Write the report files into `dir` (created if missing). Returns the
/// paths written, `summary.csv` first.
pub fn emit_report(report: &BenchmarkReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();

    let summary = dir.join("summary.csv");
    write_file(&summary, &summary_csv(&report.rows))?;
    written.push(summary);

    for run in &report.runs {
        written.extend(emit_run(run, &report.truth, dir)?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use descriptor_mhe::estimators::StepTrace;

    fn row(method: &str, n: Option<usize>) -> BenchRow {
        BenchRow {
            method: method.into(),
            n,
            n_fc: n.map(|k| k - 1),
            mse: Some(1.5),
            time_ms: None,
            time_reduction_pct: None,
            coupling_norm: None,
            error: None,
        }
    }

    #[test]
    fn empty_grid_yields_header_only_csv() {
        assert_eq!(
            summary_csv(&[]),
            "method,N,N_FC,mse,time_ms,time_reduction_pct,coupling_norm\n"
        );
    }

    #[test]
    fn cells_without_values_stay_empty() {
        let text = summary_csv(&[BenchRow {
            method: "fie".into(),
            n: None,
            n_fc: None,
            mse: Some(0.5),
            time_ms: None,
            time_reduction_pct: None,
            coupling_norm: None,
            error: Some("boom".into()),
        }]);
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line, "fie,,,5e-1,,,");
    }

    #[test]
    fn full_grid_emits_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let truth = vec![DVector::from_vec(vec![1.0, 2.0]); 3];
        let report = BenchmarkReport {
            rows: vec![row("fie", None), row("mhe", Some(5)), row("mwmhe", Some(5))],
            runs: vec![
                RunOutput {
                    key: "fie".into(),
                    estimates: truth.clone(),
                    traces: Vec::new(),
                },
                RunOutput {
                    key: "mhe_5".into(),
                    estimates: truth.clone(),
                    traces: Vec::new(),
                },
                RunOutput {
                    key: "mwmhe_5".into(),
                    estimates: truth.clone(),
                    traces: vec![StepTrace::default()],
                },
            ],
            truth,
            max_kkt: 0.0,
            truth_active_fraction: None,
        };
        let written = emit_report(&report, dir.path()).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            [
                "summary.csv",
                "estimates_fie.csv",
                "estimates_mhe_5.csv",
                "estimates_mwmhe_5.csv",
                "ledger_mwmhe_5.jsonl",
            ]
        );
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + 3);
        let estimates = std::fs::read_to_string(dir.path().join("estimates_fie.csv")).unwrap();
        assert_eq!(
            estimates.lines().next().unwrap(),
            "t,true_x1,true_x2,est_x1,est_x2"
        );
        assert_eq!(estimates.lines().count(), 1 + 3);
        let ledger = std::fs::read_to_string(dir.path().join("ledger_mwmhe_5.jsonl")).unwrap();
        assert_eq!(ledger.lines().count(), 1);
        assert!(ledger.contains("\"windows\""));
    }
}
