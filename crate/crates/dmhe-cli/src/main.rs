use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use descriptor_mhe::model::SystemFile;
use descriptor_mhe::{dkf, estimators, ConstraintSet, DescriptorSystem, Error, Prior, Result};

use dmhe_cli::bench::{mean_squared_error, run_benchmark, RunOutput};
use dmhe_cli::config::{load_config, ExperimentConfig};
use dmhe_cli::datagen::generate_data;
use dmhe_cli::report::{emit_report, emit_run, summary_csv};
use dmhe_cli::synthetic_actuator;

#[derive(Parser)]
#[command(
    name = "dmhe",
    version,
    about = "Constrained state estimation on linear descriptor systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the config's timing repeat count (0 disables timing).
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Override the config's worker count for grid cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the config's window eviction rule.
    #[arg(long, global = true, value_name = "text|flowchart")]
    eviction_rule: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a system file against the structural assumptions.
    Validate {
        /// Path to a system JSON file, or `actuator` for the built-in model.
        system: String,
    },
    /// Generate seeded truth and measurements and write them as CSV.
    Simulate { config: PathBuf },
    /// Pick the shortest back horizon whose coupling norm meets a bound.
    Tune {
        /// Path to a system JSON file, or `actuator` for the built-in model.
        system: String,
        /// Coupling-norm bound the selected lag must satisfy.
        #[arg(long)]
        bound: f64,
        /// Largest lag to try before giving up.
        #[arg(long = "max-lag", default_value_t = 64)]
        max_lag: usize,
    },
    /// Run one estimator on seeded data and write its estimate series.
    Estimate {
        config: PathBuf,
        #[arg(long, value_parser = ["fie", "mhe", "mwmhe"])]
        method: String,
        /// Estimation window horizon (mhe: defaults to the first configured
        /// horizon; mwmhe: defaults to the configured sliding window).
        #[arg(long = "N")]
        n: Option<usize>,
        /// Back horizon for mwmhe (defaults to the config's pairing rule).
        #[arg(long)]
        nfc: Option<usize>,
    },
    /// Run the full method/horizon grid and emit the report files.
    Bench { config: PathBuf },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Dimension(_) | Error::Assumption(_) | Error::InvalidInput(_) | Error::Io(_) => 2,
        Error::NotPositiveDefinite(_) | Error::NoConvergence(_) | Error::Infeasible(_) => 3,
    }
}

fn load_system(source: &str) -> Result<(DescriptorSystem, ConstraintSet, Prior)> {
    if source == "actuator" {
        synthetic_actuator(1.0, 0.1)
    } else {
        SystemFile::from_path(Path::new(source))?.into_parts()
    }
}

fn load_config_with_overrides(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(repeats) = cli.repeats {
        cfg.repeats = repeats;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(rule) = &cli.eviction_rule {
        if rule != "text" && rule != "flowchart" {
            return Err(Error::InvalidInput(format!(
                "eviction rule must be `text` or `flowchart`, got `{rule}`"
            )));
        }
        cfg.eviction_rule = rule.clone();
    }
    Ok(cfg)
}

fn cmd_validate(system: &str) -> Result<()> {
    let (sys, constraints, _) = load_system(system)?;
    let report = sys.validate();
    for check in &report.checks {
        let mark = if check.passed { "ok  " } else { "FAIL" };
        println!("[{mark}] {}: {}", check.name, check.detail);
    }
    println!(
        "dimensions: n={}, n1={}, m={}, inputs={}, constraint rows={}",
        sys.n(),
        sys.n1(),
        sys.m(),
        sys.q_dim(),
        constraints.n_ineq()
    );
    if report.all_passed() {
        println!("all structural assumptions hold");
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(Error::Assumption(format!(
            "{failed} structural check(s) failed"
        )))
    }
}

fn cmd_simulate(cfg: &ExperimentConfig) -> Result<()> {
    let (sys, constraints, prior) = cfg.system_parts()?;
    let (traj, meas) = generate_data(cfg, &sys, &constraints, &prior)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", cfg.out_dir.display())))?;
    let path = cfg.out_dir.join("simulation.csv");

    let mut text = String::from("t");
    for i in 1..=sys.n() {
        text.push_str(&format!(",x{i}"));
    }
    for i in 1..=sys.m() {
        text.push_str(&format!(",y{i}"));
    }
    text.push('\n');
    for (t, x) in traj.states.iter().enumerate() {
        text.push_str(&t.to_string());
        for v in x.iter() {
            text.push_str(&format!(",{v:e}"));
        }
        if t == 0 {
            for _ in 0..sys.m() {
                text.push(',');
            }
        } else {
            for v in meas.y(t).iter() {
                text.push_str(&format!(",{v:e}"));
            }
        }
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;

    println!(
        "simulated {} steps (seed {}), wrote {}",
        traj.horizon(),
        cfg.seed,
        path.display()
    );
    if traj.has_violations() {
        println!(
            "constraint violations at {} step(s): {:?}",
            traj.violated_steps.len(),
            traj.violated_steps
        );
    } else {
        println!("truth satisfies every constraint row");
    }
    Ok(())
}

fn cmd_tune(system: &str, bound: f64, max_lag: usize) -> Result<()> {
    let (sys, _, prior) = load_system(system)?;
    let steady = dkf::riccati_steady_state(&sys, &prior.p0, 1e-11, 50_000)?;
    let (lag, norm) = dkf::select_horizon(&steady, bound, max_lag)?;
    println!(
        "steady state reached in {} iterations; contraction spectral radius {:.6}",
        steady.iterations,
        descriptor_mhe::linalg::spectral_radius(&steady.m_mat)
    );
    println!("N_FC = {lag} (coupling norm {norm:.6e} <= bound {bound:e})");
    Ok(())
}

fn cmd_estimate(
    cfg: &ExperimentConfig,
    method: &str,
    n_flag: Option<usize>,
    nfc_flag: Option<usize>,
) -> Result<()> {
    let (sys, constraints, prior) = cfg.system_parts()?;
    let (traj, meas) = generate_data(cfg, &sys, &constraints, &prior)?;
    let truth = &traj.states[1..];
    let opts = cfg.estimator_options();
    let t = cfg.t_final;

    let (key, estimates, traces, kkt) = match method {
        "fie" => {
            let (states, _, kkt) =
                estimators::fie_smoothed(&sys, &constraints, &prior, &meas, &traj.inputs, t, &opts)?;
            ("fie".to_string(), states, Vec::new(), kkt)
        }
        "mhe" => {
            let n = n_flag.unwrap_or(cfg.horizons[0]);
            let series =
                estimators::mhe_run(&sys, &constraints, &prior, &meas, &traj.inputs, n, t, &opts)?;
            (format!("mhe_{n}"), series.filtered, Vec::new(), series.max_kkt)
        }
        "mwmhe" => {
            let n = n_flag.unwrap_or(cfg.mw_horizon);
            let nfc = match nfc_flag {
                Some(k) => k,
                None => cfg.lags(&sys, &prior)?[0],
            };
            let series = estimators::mwmhe_run(
                &sys,
                &constraints,
                &prior,
                &meas,
                &traj.inputs,
                n,
                nfc,
                t,
                &opts,
            )?;
            if let Some(audit) = &series.audit {
                println!(
                    "inactivity audit: {} dropped stage(s) checked, {} violation(s)",
                    audit.stages_checked,
                    audit.violations.len()
                );
            }
            (
                format!("mwmhe_{n}"),
                series.filtered,
                series.traces,
                series.max_kkt,
            )
        }
        other => unreachable!("clap filters methods, got {other}"),
    };

    let mse = mean_squared_error(&estimates, truth);
    let run = RunOutput {
        key,
        estimates,
        traces,
    };
    let written = emit_run(&run, truth, &cfg.out_dir)?;
    println!("mse = {mse:e}");
    println!("max kkt residual = {kkt:.3e}");
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_bench(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_benchmark(cfg)?;
    let written = emit_report(&report, &cfg.out_dir)?;
    print!("{}", summary_csv(&report.rows));
    if let Some(fraction) = report.truth_active_fraction {
        println!("# truth transitions at a constraint: {:.1}%", fraction * 100.0);
    }
    println!("# max kkt residual over all solves: {:.3e}", report.max_kkt);
    for row in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "run {} N={:?} failed: {}",
            row.method,
            row.n,
            row.error.as_deref().unwrap_or("")
        );
    }
    for path in written {
        println!("# wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate { system } => cmd_validate(system),
        Command::Simulate { config } => {
            let cfg = load_config_with_overrides(cli, config)?;
            cmd_simulate(&cfg)
        }
        Command::Tune {
            system,
            bound,
            max_lag,
        } => cmd_tune(system, *bound, *max_lag),
        Command::Estimate {
            config,
            method,
            n,
            nfc,
        } => {
            let cfg = load_config_with_overrides(cli, config)?;
            cmd_estimate(&cfg, method, *n, *nfc)
        }
        Command::Bench { config } => {
            let cfg = load_config_with_overrides(cli, config)?;
            cmd_bench(&cfg)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
