//! Flat key-value run configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::WindowConfig;
use crate::quat::UnitQuat;
use crate::residuals::{Calibration, NoiseModel};
use crate::solver::SolverConfig;
use crate::Vec3;

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected so that typos do not pass silently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    pub knot_dt: f64,
    pub window_knots: usize,
    pub calib_enabled: bool,
    pub gate_threshold: f64,
    pub gate_warmup: usize,
    pub imu_downsample: usize,
    pub uwb_downsample: usize,

    /// UWB range (or range-difference) standard deviation, m.
    pub uwb_sigma: f64,
    /// Per-axis accelerometer standard deviation, m/s².
    pub accel_sigma: f64,
    /// Per-axis gyroscope standard deviation, rad/s.
    pub gyro_sigma: f64,
    /// Accelerometer-bias increment between consecutive IMU samples, m/s².
    pub bias_accel_sigma: f64,
    /// Gyroscope-bias increment between consecutive IMU samples, rad/s.
    pub bias_gyro_sigma: f64,
    pub weight_uwb: f64,
    pub weight_imu: f64,

    pub max_iters: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub cost_tol: f64,
    pub step_tol: f64,

    /// Initial world-to-UWB rotation, `[w, x, y, z]`.
    pub q_wu: [f64; 4],
    pub t_wu: [f64; 3],
    /// Initial gravity direction in the world frame.
    pub g_dir: [f64; 3],
    pub g_mag: f64,
    pub tag_offset: [f64; 3],
}

impl Default for Config {
    fn default() -> Self {
        let window = WindowConfig::default();
        let solver = SolverConfig::default();
        let calib = Calibration::default();
        Self {
            seed: 0,
            knot_dt: window.knot_dt,
            window_knots: window.window_knots,
            calib_enabled: window.calib_enabled,
            gate_threshold: window.gate_threshold,
            gate_warmup: window.gate_warmup,
            imu_downsample: window.imu_downsample,
            uwb_downsample: window.uwb_downsample,
            uwb_sigma: 0.1,
            accel_sigma: 0.05,
            gyro_sigma: 0.005,
            bias_accel_sigma: 1e-3,
            bias_gyro_sigma: 1e-4,
            weight_uwb: 1.0,
            weight_imu: 1.0,
            max_iters: solver.max_iters,
            lambda_init: solver.lambda_init,
            lambda_up: solver.lambda_up,
            lambda_down: solver.lambda_down,
            cost_tol: solver.cost_tol,
            step_tol: solver.step_tol,
            q_wu: calib.q_wu.to_array(),
            t_wu: calib.t_wu.into(),
            g_dir: calib.g_dir.into(),
            g_mag: calib.g_mag,
            tag_offset: calib.tag_offset.into(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Checks every derived setting.
    pub fn validate(&self) -> Result<()> {
        self.window().validate()?;
        self.noise().whitening()?;
        self.solver().validate()?;
        self.calibration()?;
        Ok(())
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            knot_dt: self.knot_dt,
            window_knots: self.window_knots,
            calib_enabled: self.calib_enabled,
            gate_threshold: self.gate_threshold,
            gate_warmup: self.gate_warmup,
            imu_downsample: self.imu_downsample,
            uwb_downsample: self.uwb_downsample,
        }
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            weight_uwb: self.weight_uwb,
            weight_imu: self.weight_imu,
            ..NoiseModel::isotropic(
                self.uwb_sigma,
                self.accel_sigma,
                self.gyro_sigma,
                self.bias_accel_sigma,
                self.bias_gyro_sigma,
            )
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.max_iters,
            lambda_init: self.lambda_init,
            lambda_up: self.lambda_up,
            lambda_down: self.lambda_down,
            cost_tol: self.cost_tol,
            step_tol: self.step_tol,
        }
    }

    /// Initial calibration; the rotation and gravity direction are normalized.
    pub fn calibration(&self) -> Result<Calibration> {
        let [w, x, y, z] = self.q_wu;
        let qn = (w * w + x * x + y * y + z * z).sqrt();
        let g = Vec3::from(self.g_dir);
        let gn = g.norm();
        if !(qn > 0.0 && qn.is_finite()) {
            return Err(Error::InvalidConfig(format!("q_wu {:?} has no direction", self.q_wu)));
        }
        if !(gn > 0.0 && gn.is_finite()) {
            return Err(Error::InvalidConfig(format!("g_dir {:?} has no direction", self.g_dir)));
        }
        if !(self.g_mag > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "g_mag must be positive, got {}",
                self.g_mag
            )));
        }
        Ok(Calibration {
            q_wu: UnitQuat::new(w, x, y, z),
            t_wu: Vec3::from(self.t_wu),
            g_dir: g / gn,
            g_mag: self.g_mag,
            tag_offset: Vec3::from(self.tag_offset),
        })
    }

    /// Copies the settings of `calib` into the initial-calibration keys.
    pub fn set_calibration(&mut self, calib: &Calibration) {
        self.q_wu = calib.q_wu.to_array();
        self.t_wu = calib.t_wu.into();
        self.g_dir = calib.g_dir.into();
        self.g_mag = calib.g_mag;
        self.tag_offset = calib.tag_offset.into();
    }
}
