use std::path::Path;
use std::process::{Command, Output};

fn splinefuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splinefuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes() {
    let out = splinefuse(&["gradcheck", "--instances", "200", "--seed", "3"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn simulate_run_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = splinefuse(&["simulate", "--output", path_str(&data), "--noise-free", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "imu.csv",
        "uwb_toa.csv",
        "anchors.json",
        "groundtruth.csv",
        "config.toml",
    ] {
        assert!(data.join(f).exists(), "missing {f}");
    }

    let traj = dir.path().join("trajectory.csv");
    let report = dir.path().join("report.json");
    let out = splinefuse(&[
        "run",
        path_str(&data),
        "--output",
        path_str(&traj),
        "--report",
        path_str(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&report);
    let ape = r["ape_rmse"].as_f64().unwrap();
    assert!(ape < 1e-6, "APE {ape}");
    assert!(r["solver"]["median_iterations"].as_f64().is_some());

    let eval = dir.path().join("eval.json");
    let out = splinefuse(&[
        "evaluate",
        path_str(&traj),
        path_str(&data.join("groundtruth.csv")),
        "--output",
        path_str(&eval),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e = read_json(&eval);
    assert!(e["ape_rmse"].as_f64().unwrap() < 1e-6);
    assert!(e["matched"].as_u64().unwrap() > 1000);
}

#[test]
fn simulate_tdoa_writes_difference_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = splinefuse(&["simulate", "--output", path_str(dir.path()), "--tdoa"]);
    assert!(out.status.success());
    assert!(dir.path().join("uwb_tdoa.csv").exists());
    assert!(!dir.path().join("uwb_toa.csv").exists());
}

#[test]
fn fit_orientation_reports_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("fit.json");
    let out = splinefuse(&["fit-orientation", "--seed", "2", "--output", path_str(&json)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&json);
    assert!(v["rmse_rad"].as_f64().unwrap() < 1e-3);
    assert_eq!(v["knots"].as_u64(), Some(100));
}

#[test]
fn errors_exit_with_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    for args in [
        vec!["run", path_str(&missing)],
        vec!["evaluate", path_str(&missing), path_str(&missing)],
        vec!["simulate", "--output", path_str(dir.path()), "--scale", "0"],
    ] {
        let out = splinefuse(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error:"), "{args:?}");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = splinefuse(&["simulate", "--output", path_str(dir.path()), "--noise-free"]);
    assert!(out.status.success());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "gate_treshold = 0.5\n").unwrap();
    let out = splinefuse(&["run", path_str(dir.path()), "--config", path_str(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gate_treshold"));
}
