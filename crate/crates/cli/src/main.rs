use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use splinefuse::estimator::{Estimator, Phase};
use splinefuse::fit::{fit_orientation, so3_rmse};
use splinefuse::gradcheck;
use splinefuse::io::dataset::{read_poses, write_trajectory};
use splinefuse::io::synth::{
    synth_fusion_scenario, synth_orientation_sequence, OrientationSynthConfig, RangeMode, ScenarioConfig, Shape,
};
use splinefuse::io::{evaluate_ape, load_dataset, write_dataset, Config, Dataset, PoseSample, SolverSummary};
use splinefuse::residuals::Measurement;
use splinefuse::solver::SolverConfig;

#[derive(Parser)]
#[command(
    name = "splinefuse",
    version,
    about = "Continuous-time UWB-inertial fusion on cubic B-splines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a rotation spline to synthetic orientation and angular-rate samples.
    FitOrientation(FitArgs),
    /// Run the sliding-window estimator on a dataset directory.
    Run(RunArgs),
    /// Generate a synthetic dataset directory.
    Simulate(SimulateArgs),
    /// Compare every analytic Jacobian against finite differences.
    Gradcheck(GradcheckArgs),
    /// Absolute position error between two trajectory files.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplies the knot count and the number of samples.
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// Orientation and angular-rate samples per second.
    #[arg(long)]
    rate: Option<f64>,
    /// Write the result as JSON to this file.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory.
    dataset: PathBuf,
    /// Configuration file; defaults to the dataset's config.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trajectory output file (CSV).
    #[arg(long, default_value = "trajectory.csv")]
    output: PathBuf,
    /// Trajectory export rate, Hz.
    #[arg(long, default_value_t = 200.0)]
    rate: f64,
    #[arg(long)]
    downsample_imu: Option<usize>,
    #[arg(long)]
    downsample_uwb: Option<usize>,
    #[arg(long)]
    gate_threshold: Option<f64>,
    /// Keep the initial calibration fixed.
    #[arg(long)]
    no_calib: bool,
    /// Write the evaluation report (JSON) here when ground truth is present.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Lissajous,
    Circle,
    Static,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dataset directory to create.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base configuration written into the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario length multiplier (20 s per unit).
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// IMU rate, Hz; UWB runs at half of it.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_enum, default_value_t = ShapeArg::Lissajous)]
    shape: ShapeArg,
    /// Emit range differences instead of ranges.
    #[arg(long)]
    tdoa: bool,
    /// Disable every noise source and outlier.
    #[arg(long)]
    noise_free: bool,
    #[arg(long)]
    outlier_rate: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per suite.
    #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
    instances: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory (CSV).
    estimate: PathBuf,
    /// Reference trajectory (CSV).
    reference: PathBuf,
    /// Largest time gap for associating samples, s.
    #[arg(long, default_value_t = 0.05)]
    max_dt: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::FitOrientation(a) => fit_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn fit_cmd(a: FitArgs) -> Result<ExitCode> {
    if a.scale == 0 {
        bail!("--scale must be at least 1");
    }
    let mut cfg = OrientationSynthConfig {
        seed: a.seed,
        scale: a.scale,
        ..Default::default()
    };
    if let Some(rate) = a.rate {
        cfg.rate = rate;
    }
    let seq = synth_orientation_sequence(&cfg);
    let fit = fit_orientation(
        &seq.truth,
        &seq.orientations,
        &seq.rates,
        cfg.orientation_sigma,
        cfg.gyro_sigma,
        &SolverConfig::default(),
    )?;
    let times: Vec<f64> = seq.orientations.iter().map(|m| m.t).collect();
    let rmse = so3_rmse(&fit.spline, &seq.truth, &times)?;
    let seconds = fit.elapsed.as_secs_f64();
    println!(
        "knots {}  samples {}  iterations {}  rmse {rmse:.3e} rad  time {seconds:.3} s",
        seq.truth.knots().len(),
        seq.orientations.len(),
        fit.stats.iterations
    );
    if let Some(path) = a.output {
        write_json(
            &path,
            &serde_json::json!({
                "seed": a.seed,
                "scale": a.scale,
                "rate": cfg.rate,
                "knots": seq.truth.knots().len(),
                "samples": seq.orientations.len(),
                "rmse_rad": rmse,
                "seconds": seconds,
                "solver": fit.stats,
            }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_cmd(a: RunArgs) -> Result<ExitCode> {
    let (data, warnings) = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    if warnings.total() > 0 {
        log::warn!("{warnings:?}");
    }
    let mut cfg = match &a.config {
        Some(path) => Config::load(path)?,
        None => data.config.clone(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(k) = a.downsample_imu {
        cfg.imu_downsample = k;
    }
    if let Some(k) = a.downsample_uwb {
        cfg.uwb_downsample = k;
    }
    if let Some(g) = a.gate_threshold {
        cfg.gate_threshold = g;
    }
    if a.no_calib {
        cfg.calib_enabled = false;
    }
    cfg.validate()?;

    let mut est = Estimator::new(
        cfg.window(),
        cfg.noise(),
        cfg.solver(),
        data.anchors.clone(),
        cfg.calibration()?,
    )?;
    let start = Instant::now();
    for m in merged(&data) {
        est.ingest(m)?;
    }
    est.finish()?;
    let wall = start.elapsed().as_secs_f64();
    let samples = est.export_trajectory(a.rate)?;
    write_trajectory(&a.output, &samples).with_context(|| format!("writing {}", a.output.display()))?;

    let calib = est.calibration();
    let sliding: Vec<_> = est
        .stats()
        .iter()
        .filter(|r| r.phase == Phase::Sliding)
        .map(|r| &r.stats)
        .collect();
    let all: Vec<_> = est.stats().iter().map(|r| &r.stats).collect();
    let summary = SolverSummary::from_stats(if sliding.is_empty() { all } else { sliding });
    println!(
        "window solves {}  wall {wall:.2} s  counters {:?}",
        est.stats().len(),
        est.counters()
    );
    if let Some(s) = &summary {
        println!(
            "per step: iterations {:.2} ± {:.2} (median {})  time {:.1} ± {:.1} ms",
            s.mean_iterations, s.std_iterations, s.median_iterations, s.mean_ms, s.std_ms
        );
    }
    println!(
        "calibration: q_wu {:?}  t_wu {:?}  g_dir {:?}",
        calib.q_wu.to_array(),
        <[f64; 3]>::from(calib.t_wu),
        <[f64; 3]>::from(calib.g_dir)
    );
    println!("trajectory: {} samples -> {}", samples.len(), a.output.display());

    if let Some(gt) = &data.groundtruth {
        let poses: Vec<PoseSample> = samples.iter().map(PoseSample::from).collect();
        let mut report = evaluate_ape(&poses, gt, 0.5 * cfg.knot_dt)?;
        report.solver = summary;
        println!(
            "APE rmse {:.4e} m  xyz {:.3e} {:.3e} {:.3e}  matched {} unmatched {}",
            report.ape_rmse,
            report.rmse_xyz[0],
            report.rmse_xyz[1],
            report.rmse_xyz[2],
            report.matched,
            report.unmatched
        );
        if let Some(path) = &a.report {
            write_json(path, &serde_json::to_value(&report)?)?;
        }
    } else if a.report.is_some() {
        log::warn!("dataset has no ground truth; no report written");
    }
    Ok(ExitCode::SUCCESS)
}

fn merged(data: &Dataset) -> Vec<Measurement> {
    splinefuse::io::synth::merge_streams(&data.imu, &data.uwb)
}

fn simulate_cmd(a: SimulateArgs) -> Result<ExitCode> {
    if a.scale == 0 {
        bail!("--scale must be at least 1");
    }
    let mut sc_cfg = ScenarioConfig {
        seed: a.seed,
        shape: match a.shape {
            ShapeArg::Lissajous => Shape::Lissajous,
            ShapeArg::Circle => Shape::Circle,
            ShapeArg::Static => Shape::Static,
        },
        range_mode: if a.tdoa { RangeMode::Tdoa } else { RangeMode::Toa },
        ..Default::default()
    };
    sc_cfg.duration *= a.scale as f64;
    if let Some(rate) = a.rate {
        sc_cfg.imu_rate = rate;
        sc_cfg.uwb_rate = 0.5 * rate;
    }
    if let Some(r) = a.outlier_rate {
        sc_cfg.outlier_rate = r;
    }
    if a.noise_free {
        sc_cfg = sc_cfg.noise_free();
    }
    let mut cfg = match &a.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.seed = a.seed;
    cfg.knot_dt = sc_cfg.knot_dt;
    if !a.noise_free {
        cfg.uwb_sigma = sc_cfg.uwb_sigma;
        cfg.accel_sigma = sc_cfg.accel_sigma;
        cfg.gyro_sigma = sc_cfg.gyro_sigma;
    }
    cfg.g_mag = sc_cfg.gravity_mag;
    cfg.validate()?;

    let sc = synth_fusion_scenario(&sc_cfg);
    let data = Dataset {
        imu: sc.imu,
        uwb: sc.uwb,
        anchors: sc.anchors,
        groundtruth: Some(sc.groundtruth.iter().map(PoseSample::from).collect()),
        config: cfg,
    };
    write_dataset(&a.output, &data)?;
    println!(
        "wrote {}: {} imu, {} uwb ({} outliers), {} ground-truth samples",
        a.output.display(),
        data.imu.len(),
        data.uwb.len(),
        sc.outliers.len(),
        data.groundtruth.as_ref().map_or(0, Vec::len)
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<ExitCode> {
    let reports = gradcheck::run_all(a.instances, a.seed);
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{status} {:<24} instances {:>4}  max rel err {:.2e} (tol {:.0e})",
            r.name, r.instances, r.max_rel_err, r.tolerance
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<ExitCode> {
    let est = read_sorted(&a.estimate)?;
    let reference = read_sorted(&a.reference)?;
    let report = evaluate_ape(&est, &reference, a.max_dt)?;
    let json = serde_json::to_value(&report)?;
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(path) = a.output {
        write_json(&path, &json)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn read_sorted(path: &Path) -> Result<Vec<PoseSample>> {
    let mut poses = read_poses(path).with_context(|| format!("reading {}", path.display()))?;
    poses.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(poses)
}
