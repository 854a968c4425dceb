//! Side-by-side benchmark: the full-information baseline once, then the
//! moving-horizon and multiple-window engines over the configured horizon
//! grid, all on identical data, with median wall times and the steady-state
//! coupling norm per lag.

use std::time::Instant;

use descriptor_mhe::estimators::{self, EstimateSeries, EstimatorOptions, StepTrace};
use descriptor_mhe::model::MeasurementRecord;
use descriptor_mhe::{dkf, ConstraintSet, DescriptorSystem, Prior, Result};
use nalgebra::DVector;

use crate::config::ExperimentConfig;
use crate::datagen::generate_data;

/// One summary line. `None` cells are left empty in the CSV: timing when
/// repeats are disabled, the reduction and coupling columns where they do
/// not apply, everything but `error` when the engine failed.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: String,
    pub n: Option<usize>,
    pub n_fc: Option<usize>,
    pub mse: Option<f64>,
    pub time_ms: Option<f64>,
    pub time_reduction_pct: Option<f64>,
    pub coupling_norm: Option<f64>,
    pub error: Option<String>,
}

/// Estimate series of one grid cell, for the per-run output files.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// `fie`, `mhe_<N>`, or `mwmhe_<N>`.
    pub key: String,
    /// Estimated state at times `1 ..= t_final`.
    pub estimates: Vec<DVector<f64>>,
    /// Ledger snapshots (multiple-window cells only).
    pub traces: Vec<StepTrace>,
}

/// Everything a benchmark produced: summary rows in emission order, the
/// per-run estimate series, the shared truth, and solver diagnostics.
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchRow>,
    pub runs: Vec<RunOutput>,
    /// True states `x_1 ..= x_T` the estimates are scored against.
    pub truth: Vec<DVector<f64>>,
    /// Worst scaled KKT residual over every solve of every run.
    pub max_kkt: f64,
    /// Fraction of transitions whose true states sit on a constraint row.
    pub truth_active_fraction: Option<f64>,
}

/// Mean squared error: sum of squared component errors over all times,
/// divided by the number of times.
pub fn mean_squared_error(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    assert_eq!(estimates.len(), truth.len(), "series lengths differ");
    let total: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, x)| (e - x).norm_squared())
        .sum();
    total / estimates.len() as f64
}

struct Cell {
    method: &'static str,
    n: Option<usize>,
    n_fc: Option<usize>,
}

struct CellOutcome {
    row: BenchRow,
    run: Option<RunOutput>,
    kkt: f64,
}

struct CellContext<'a> {
    sys: &'a DescriptorSystem,
    constraints: &'a ConstraintSet,
    prior: &'a Prior,
    meas: &'a MeasurementRecord,
    inputs: &'a [DVector<f64>],
    truth: &'a [DVector<f64>],
    opts: &'a EstimatorOptions,
    t_final: usize,
    mw_horizon: usize,
    repeats: usize,
}

fn run_engine(ctx: &CellContext<'_>, cell: &Cell) -> Result<(Vec<DVector<f64>>, EstimateSeries)> {
    match cell.method {
        "fie" => {
            let (states, _, kkt) = estimators::fie_smoothed(
                ctx.sys,
                ctx.constraints,
                ctx.prior,
                ctx.meas,
                ctx.inputs,
                ctx.t_final,
                ctx.opts,
            )?;
            let series = EstimateSeries {
                max_kkt: kkt,
                ..Default::default()
            };
            Ok((states, series))
        }
        "mhe" => {
            let series = estimators::mhe_run(
                ctx.sys,
                ctx.constraints,
                ctx.prior,
                ctx.meas,
                ctx.inputs,
                cell.n.expect("mhe rows carry N"),
                ctx.t_final,
                ctx.opts,
            )?;
            Ok((series.filtered.clone(), series))
        }
        "mwmhe" => {
            let series = estimators::mwmhe_run(
                ctx.sys,
                ctx.constraints,
                ctx.prior,
                ctx.meas,
                ctx.inputs,
                ctx.mw_horizon,
                cell.n_fc.expect("mwmhe rows carry N_FC"),
                ctx.t_final,
                ctx.opts,
            )?;
            Ok((series.filtered.clone(), series))
        }
        other => unreachable!("unknown method {other}"),
    }
}

fn run_cell(ctx: &CellContext<'_>, cell: &Cell) -> CellOutcome {
    let key = match cell.n {
        Some(n) => format!("{}_{n}", cell.method),
        None => cell.method.to_string(),
    };
    // Warm run produces the estimates; its result is kept.
    let (estimates, series) = match run_engine(ctx, cell) {
        Ok(out) => out,
        Err(e) => {
            return CellOutcome {
                row: BenchRow {
                    method: cell.method.into(),
                    n: cell.n,
                    n_fc: cell.n_fc,
                    mse: None,
                    time_ms: None,
                    time_reduction_pct: None,
                    coupling_norm: None,
                    error: Some(e.to_string()),
                },
                run: None,
                kkt: 0.0,
            }
        }
    };
    let mse = mean_squared_error(&estimates, ctx.truth);

    // Median wall time over the timing repeats (cache warm, data ready).
    let time_ms = if ctx.repeats > 0 {
        let mut samples = Vec::with_capacity(ctx.repeats);
        for _ in 0..ctx.repeats {
            let start = Instant::now();
            let _ = run_engine(ctx, cell);
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        samples.sort_by(f64::total_cmp);
        Some(samples[samples.len() / 2])
    } else {
        None
    };

    CellOutcome {
        row: BenchRow {
            method: cell.method.into(),
            n: cell.n,
            n_fc: cell.n_fc,
            mse: Some(mse),
            time_ms,
            time_reduction_pct: None,
            coupling_norm: None,
            error: None,
        },
        run: Some(RunOutput {
            key,
            estimates,
            traces: series.traces,
        }),
        kkt: series.max_kkt,
    }
}

/// Run the configured grid. Per-cell engine failures land in the row's
/// `error` cell; the report is still produced.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<BenchmarkReport> {
    let (sys, constraints, prior) = config.system_parts()?;
    let (traj, meas) = generate_data(config, &sys, &constraints, &prior)?;
    let truth: Vec<DVector<f64>> = traj.states[1..].to_vec();
    let inputs = traj.inputs.clone();
    let opts = config.estimator_options();
    let lags = config.lags(&sys, &prior)?;

    let truth_active_fraction = if constraints.is_empty() {
        None
    } else {
        let tol = config.eps_activity;
        let active = (0..traj.horizon())
            .filter(|&k| {
                let gap = constraints.violation(&traj.states[k], &traj.states[k + 1]);
                (0..constraints.n_ineq())
                    .any(|l| gap[l] >= -tol * (1.0 + constraints.d_c[l].abs()))
            })
            .count();
        Some(active as f64 / traj.horizon() as f64)
    };

    let mut cells = Vec::new();
    if config.methods.iter().any(|m| m == "fie") {
        cells.push(Cell {
            method: "fie",
            n: None,
            n_fc: None,
        });
    }
    for (i, &n) in config.horizons.iter().enumerate() {
        if config.methods.iter().any(|m| m == "mhe") {
            cells.push(Cell {
                method: "mhe",
                n: Some(n),
                n_fc: None,
            });
        }
        if config.methods.iter().any(|m| m == "mwmhe") {
            cells.push(Cell {
                method: "mwmhe",
                n: Some(n),
                n_fc: Some(lags[i]),
            });
        }
    }

    let ctx = CellContext {
        sys: &sys,
        constraints: &constraints,
        prior: &prior,
        meas: &meas,
        inputs: &inputs,
        truth: &truth,
        opts: &opts,
        t_final: config.t_final,
        mw_horizon: config.mw_horizon,
        repeats: config.repeats,
    };

    let outcomes: Vec<CellOutcome> = if config.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| descriptor_mhe::Error::InvalidInput(format!("worker pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            cells.par_iter().map(|c| run_cell(&ctx, c)).collect()
        })
    } else {
        cells.iter().map(|c| run_cell(&ctx, c)).collect()
    };

    let mut rows: Vec<BenchRow> = Vec::with_capacity(outcomes.len());
    let mut runs = Vec::new();
    let mut max_kkt: f64 = 0.0;
    for outcome in outcomes {
        rows.push(outcome.row);
        if let Some(run) = outcome.run {
            runs.push(run);
        }
        max_kkt = max_kkt.max(outcome.kkt);
    }

    // Time reduction of each multiple-window row against the plain row at
    // the same N.
    for i in 0..rows.len() {
        if rows[i].method != "mwmhe" {
            continue;
        }
        let (Some(n), Some(t_mw)) = (rows[i].n, rows[i].time_ms) else {
            continue;
        };
        let baseline = rows
            .iter()
            .find(|r| r.method == "mhe" && r.n == Some(n))
            .and_then(|r| r.time_ms);
        if let Some(t_mhe) = baseline {
            rows[i].time_reduction_pct = Some((t_mw - t_mhe) / t_mhe * 100.0);
        }
    }

    // Coupling norm per lag, from one steady-state computation.
    if rows.iter().any(|r| r.method == "mwmhe" && r.error.is_none()) {
        let steady = dkf::riccati_steady_state(&sys, &prior.p0, 1e-11, 50_000)?;
        for row in rows.iter_mut().filter(|r| r.method == "mwmhe") {
            let Some(q) = row.n_fc else { continue };
            let mut power = nalgebra::DMatrix::identity(sys.n(), sys.n());
            for _ in 0..q {
                power = &power * &steady.m_mat;
            }
            row.coupling_norm = Some(dkf::coupling_norm(&steady.gamma, &power)?);
        }
    }

    Ok(BenchmarkReport {
        rows,
        runs,
        truth,
        max_kkt,
        truth_active_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_produces_expected_rows() {
        let cfg = ExperimentConfig::parse_str(
            r#"{"system": "actuator", "t_final": 40, "horizons": [3, 5], "repeats": 0}"#,
            None,
        )
        .unwrap();
        let report = run_benchmark(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1 + 2 * 2);
        assert_eq!(report.rows[0].method, "fie");
        assert_eq!(report.rows[1].method, "mhe");
        assert_eq!(report.rows[1].n, Some(3));
        assert_eq!(report.rows[2].method, "mwmhe");
        assert_eq!(report.rows[2].n_fc, Some(2));
        for row in &report.rows {
            assert!(row.error.is_none(), "{:?}", row.error);
            assert!(row.mse.is_some());
            assert!(row.time_ms.is_none(), "repeats 0 must disable timing");
        }
        // Coupling norms decrease with the lag.
        let norms: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.method == "mwmhe")
            .map(|r| r.coupling_norm.unwrap())
            .collect();
        assert!(norms[1] < norms[0]);
        assert!(report.max_kkt < 1e-8, "kkt {}", report.max_kkt);
        assert_eq!(report.runs.len(), 5);
        assert_eq!(report.truth.len(), 40);
        for run in &report.runs {
            assert_eq!(run.estimates.len(), 40);
        }
    }

    #[test]
    fn workers_do_not_change_results() {
        let base = r#"{"system": "actuator", "t_final": 30, "horizons": [4], "repeats": 0"#;
        let cfg1 =
            ExperimentConfig::parse_str(&format!("{base}}}"), None).unwrap();
        let cfg2 =
            ExperimentConfig::parse_str(&format!("{base}, \"workers\": 3}}"), None).unwrap();
        let r1 = run_benchmark(&cfg1).unwrap();
        let r2 = run_benchmark(&cfg2).unwrap();
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(a.method, b.method);
            assert_eq!(a.mse, b.mse);
        }
    }
}
