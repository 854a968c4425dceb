//! End-to-end checks of the command-line surface: exit codes, emitted
//! files, and agreement between the shipped actuator file and the
//! built-in system.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use descriptor_mhe::model::SystemFile;
use dmhe_cli::synthetic_actuator;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmhe"))
        .args(args)
        .output()
        .expect("spawn dmhe")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

/// The checked-in actuator file must stay in lockstep with the built-in
/// system; both are advertised as the same benchmark.
#[test]
fn shipped_actuator_file_matches_builtin() {
    let path = repo_path("configs/actuator.json");
    let (sys, cons, prior) = SystemFile::from_path(&path)
        .and_then(SystemFile::into_parts)
        .expect("shipped file must parse");
    let (sys_b, cons_b, prior_b) = synthetic_actuator(1.0, 0.1).unwrap();
    assert_eq!(sys, sys_b, "system matrices drifted from the builtin");
    assert_eq!(cons, cons_b, "constraint rows drifted from the builtin");
    assert_eq!(prior, prior_b, "prior drifted from the builtin");
}

#[test]
fn validate_accepts_builtin_and_shipped_file() {
    for source in ["actuator", repo_path("configs/actuator.json").to_str().unwrap()] {
        let out = run(&["validate", source]);
        assert_eq!(exit_code(&out), 0, "{source}: {}", stdout(&out));
        assert!(stdout(&out).contains("all structural assumptions hold"));
    }
}

#[test]
fn validate_rejects_missing_and_malformed_files() {
    let out = run(&["validate", "/nonexistent/system.json"]);
    assert_eq!(exit_code(&out), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = run(&["validate", bad.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn validate_flags_rank_deficient_system() {
    // Second state column is invisible to both the dynamics and the
    // measurements, so the column-rank check must fail.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deficient.json");
    std::fs::write(
        &path,
        r#"{"E":[[1.0,0.0]],"A":[[1.0,0.0]],"H":[[1.0,0.0]],"Q":[[1.0]],"R":[[1.0]]}"#,
    )
    .unwrap();
    let out = run(&["validate", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stdout(&out).contains("FAIL"), "{}", stdout(&out));
}

#[test]
fn tune_selects_lag_and_fails_on_unreachable_bound() {
    let out = run(&["tune", "actuator", "--bound", "0.6"]);
    assert_eq!(exit_code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("N_FC = 27"), "{}", stdout(&out));

    // The coupling norm decays too slowly to reach 0.25 within the
    // default lag cap, which is a solver-class failure, not bad input.
    let out = run(&["tune", "actuator", "--bound", "0.25"]);
    assert_eq!(exit_code(&out), 3);

    let out = run(&["tune", "actuator", "--bound", "0.25", "--max-lag", "200"]);
    assert_eq!(exit_code(&out), 0);
    assert!(stdout(&out).contains("N_FC = 71"), "{}", stdout(&out));
}

fn small_config(dir: &Path) -> PathBuf {
    let out_dir = dir.join("out");
    let cfg = serde_json::json!({
        "system": "actuator",
        "t_final": 30,
        "horizons": [4],
        "mw_horizon": 1,
        "seed": 7,
        "out_dir": out_dir,
        "repeats": 0,
        "posthoc_check": true,
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn simulate_and_estimate_write_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let out = run(&["simulate", cfg]);
    assert_eq!(exit_code(&out), 0, "{}", stdout(&out));
    let sim = dir.path().join("out/simulation.csv");
    let text = std::fs::read_to_string(&sim).unwrap();
    assert!(text.starts_with("t,x1,x2,x3,x4,y1,y2\n"), "{text}");
    assert_eq!(text.lines().count(), 32, "header plus states 0..=30");

    let out = run(&["estimate", cfg, "--method", "mhe", "--N", "4"]);
    assert_eq!(exit_code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("mse = "));
    assert!(dir.path().join("out/estimates_mhe_4.csv").exists());

    let out = run(&["estimate", cfg, "--method", "mwmhe", "--N", "4", "--nfc", "3"]);
    assert_eq!(exit_code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("inactivity audit"), "{}", stdout(&out));
    assert!(dir.path().join("out/estimates_mwmhe_4.csv").exists());
    assert!(dir.path().join("out/ledger_mwmhe_4.jsonl").exists());

    let out = run(&["estimate", cfg, "--method", "kalman"]);
    assert_eq!(exit_code(&out), 2, "clap rejects unknown methods");
}

#[test]
fn bench_smoke_emits_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());

    let out = run(&["bench", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stdout(&out));
    let summary = dir.path().join("out/summary.csv");
    let text = std::fs::read_to_string(&summary).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "method,N,N_FC,mse,time_ms,time_reduction_pct,coupling_norm"
    );
    assert_eq!(lines.len(), 4, "fie plus one mhe/mwmhe pair: {text}");
    assert!(lines[1].starts_with("fie,"));
    assert!(lines[2].starts_with("mhe,4,"));
    assert!(lines[3].starts_with("mwmhe,4,3,"));
}

#[test]
fn bad_eviction_rule_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = run(&[
        "bench",
        cfg.to_str().unwrap(),
        "--eviction-rule",
        "prose",
    ]);
    assert_eq!(exit_code(&out), 2);
}
