//! Synthetic data with exact spline ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bspline::{KnotGrid, QuaternionSpline};
use crate::fit::{AngVelMeasurement, OrientationMeasurement};
use crate::quat::exp_map;
use crate::residuals::{AnchorMap, Calibration, ImuMeasurement, Measurement, UwbTdoaMeasurement, UwbToaMeasurement};
use crate::trajectory::{KnotState, StateSample, Trajectory, Vec6};
use crate::{UnitQuat, Vec3};

fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vec3 {
    Vec3::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

/// Orientation-fitting benchmark: a random smooth rotation spline observed
/// through noisy orientations and angular rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrientationSynthConfig {
    pub seed: u64,
    /// Knots at scale 1; multiplied by `scale`.
    pub base_knots: usize,
    pub scale: usize,
    pub knot_dt: f64,
    /// Orientation and angular-velocity samples per second.
    pub rate: f64,
    /// Per-axis standard deviation of the orientation noise in the tangent
    /// space of `Exp`: the sample is `q ⊗ Exp(n)`, so `n` is a half-angle
    /// rotation vector.
    pub orientation_sigma: f64,
    /// Per-axis angular-rate noise, rad/s.
    pub gyro_sigma: f64,
    /// Per-axis standard deviation of the tangent step between truth knots.
    pub knot_step_sigma: f64,
}

impl Default for OrientationSynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            base_knots: 100,
            scale: 1,
            knot_dt: 0.1,
            rate: 1000.0,
            orientation_sigma: 1e-2,
            gyro_sigma: 1e-2,
            knot_step_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationSequence {
    pub truth: QuaternionSpline,
    pub orientations: Vec<OrientationMeasurement>,
    pub rates: Vec<AngVelMeasurement>,
}

pub fn synth_orientation_sequence(cfg: &OrientationSynthConfig) -> OrientationSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = (cfg.base_knots * cfg.scale.max(1)).max(4);
    let mut q = UnitQuat::identity();
    let knots: Vec<UnitQuat> = (0..count)
        .map(|_| {
            q = q.boxplus(&gaussian3(&mut rng, cfg.knot_step_sigma));
            q
        })
        .collect();
    let grid = KnotGrid::new(0.0, cfg.knot_dt, count).expect("at least four knots");
    let truth = QuaternionSpline::new(grid, knots).expect("grid matches knots");
    // `rate · count · dt` samples spread evenly over the valid span, so the
    // sample count scales exactly with the knot count
    let (start, end) = grid.valid_span();
    let n = ((count as f64 * cfg.knot_dt * cfg.rate).round() as usize).max(1);
    let spacing = (end - start) / n as f64;
    let mut orientations = Vec::with_capacity(n);
    let mut rates = Vec::with_capacity(n);
    for i in 0..n {
        let t = start + (i as f64 + 0.5) * spacing;
        let seg = truth.segment(t).expect("inside span");
        let q = seg.orientation();
        orientations.push(OrientationMeasurement {
            t,
            q: if cfg.orientation_sigma > 0.0 {
                q.boxplus(&gaussian3(&mut rng, cfg.orientation_sigma))
            } else {
                q
            },
        });
        rates.push(AngVelMeasurement {
            t,
            omega: seg.angular_velocity() + gaussian3(&mut rng, cfg.gyro_sigma),
        });
    }
    OrientationSequence {
        truth,
        orientations,
        rates,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Lissajous,
    Circle,
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeMode {
    Toa,
    Tdoa,
}

/// UWB-inertial scenario. Truth is a spline on the estimator's knot grid
/// (first knot at `-2·knot_dt`, identity pose) so that a correct estimator
/// can reproduce it exactly from noise-free data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration: f64,
    pub knot_dt: f64,
    pub shape: Shape,
    pub range_mode: RangeMode,
    pub imu_rate: f64,
    pub uwb_rate: f64,
    /// Seconds at rest before the motion ramps in.
    pub static_duration: f64,
    /// Seconds over which the motion amplitude ramps from 0 to 1.
    pub ramp_duration: f64,
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub uwb_sigma: f64,
    pub outlier_rate: f64,
    pub outlier_min: f64,
    pub outlier_max: f64,
    pub bias_accel: [f64; 3],
    pub bias_gyro: [f64; 3],
    /// Yaw of the world-to-UWB rotation, degrees.
    pub calib_yaw_deg: f64,
    pub calib_translation: [f64; 3],
    /// Tilt of the gravity direction away from world +z, degrees.
    pub gravity_tilt_deg: f64,
    pub gravity_mag: f64,
    pub tag_offset: [f64; 3],
    /// Half extents of the anchor box around the UWB-frame trajectory centre.
    pub anchor_half_extent: [f64; 3],
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 20.0,
            knot_dt: 0.1,
            shape: Shape::Lissajous,
            range_mode: RangeMode::Toa,
            imu_rate: 100.0,
            uwb_rate: 50.0,
            static_duration: 1.0,
            ramp_duration: 2.0,
            accel_sigma: 0.05,
            gyro_sigma: 0.005,
            uwb_sigma: 0.1,
            outlier_rate: 0.0,
            outlier_min: 1.0,
            outlier_max: 3.0,
            bias_accel: [0.05, -0.04, 0.03],
            bias_gyro: [0.003, -0.002, 0.001],
            calib_yaw_deg: 30.0,
            calib_translation: [1.0, 2.0, 0.0],
            gravity_tilt_deg: 10.0,
            gravity_mag: 9.81,
            tag_offset: [0.0, 0.0, 0.0],
            anchor_half_extent: [8.0, 8.0, 2.5],
        }
    }
}

impl ScenarioConfig {
    /// Same scenario with every noise source and outlier switched off.
    pub fn noise_free(mut self) -> Self {
        self.accel_sigma = 0.0;
        self.gyro_sigma = 0.0;
        self.uwb_sigma = 0.0;
        self.outlier_rate = 0.0;
        self
    }

    pub fn true_calibration(&self) -> Calibration {
        let tilt = self.gravity_tilt_deg.to_radians();
        Calibration {
            q_wu: UnitQuat::from_axis_angle(&Vec3::z(), self.calib_yaw_deg.to_radians()),
            t_wu: Vec3::from(self.calib_translation),
            g_dir: Vec3::new(0.0, -tilt.sin(), tilt.cos()),
            g_mag: self.gravity_mag,
            tag_offset: Vec3::from(self.tag_offset),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub truth: Trajectory,
    pub calibration: Calibration,
    pub anchors: AnchorMap,
    pub imu: Vec<ImuMeasurement>,
    pub uwb: Vec<Measurement>,
    /// Indices into `uwb` of injected outliers.
    pub outliers: Vec<usize>,
    pub groundtruth: Vec<StateSample>,
}

impl Scenario {
    /// IMU and UWB measurements merged in time order (IMU first on ties).
    pub fn merged(&self) -> Vec<Measurement> {
        merge_streams(&self.imu, &self.uwb)
    }
}

pub fn merge_streams(imu: &[ImuMeasurement], uwb: &[Measurement]) -> Vec<Measurement> {
    let mut out = Vec::with_capacity(imu.len() + uwb.len());
    let (mut i, mut j) = (0, 0);
    while i < imu.len() || j < uwb.len() {
        if j >= uwb.len() || (i < imu.len() && imu[i].t <= uwb[j].t()) {
            out.push(Measurement::Imu(imu[i].clone()));
            i += 1;
        } else {
            out.push(uwb[j].clone());
            j += 1;
        }
    }
    out
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (x * 6.0 - 15.0) + 10.0)
}

/// Motion amplitude envelope and the pose offset it scales.
fn motion(cfg: &ScenarioConfig, t: f64) -> (Vec3, Vec3) {
    let env = if cfg.ramp_duration > 0.0 {
        smoothstep((t - cfg.static_duration) / cfg.ramp_duration)
    } else if t >= cfg.static_duration {
        1.0
    } else {
        0.0
    };
    let tau = std::f64::consts::TAU;
    let (p, heading) = match cfg.shape {
        Shape::Static => (Vec3::zeros(), 0.0),
        Shape::Circle => {
            let w = tau / 10.0;
            (
                Vec3::new(3.0 * (w * t).sin(), 3.0 * (1.0 - (w * t).cos()), 0.0),
                0.6 * (w * t).sin(),
            )
        }
        Shape::Lissajous => (
            Vec3::new(
                3.0 * (tau * t / 9.0).sin(),
                2.5 * (tau * t / 6.0).sin(),
                0.6 * (tau * t / 4.0).sin(),
            ),
            0.7 * (tau * t / 8.0).sin(),
        ),
    };
    let att = match cfg.shape {
        Shape::Static => Vec3::zeros(),
        _ => Vec3::new(0.12 * (tau * t / 3.0).sin(), 0.1 * (tau * t / 4.5).sin(), heading),
    };
    (p * env, att * env)
}

pub fn synth_fusion_scenario(cfg: &ScenarioConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = cfg.knot_dt;
    let t0 = -2.0 * dt;
    let count = (cfg.duration / dt).ceil() as usize + 4;
    let bias = Vec6::from_iterator(cfg.bias_accel.iter().chain(&cfg.bias_gyro).copied());
    let knots = (0..count)
        .map(|k| {
            let (p, att) = motion(cfg, t0 + k as f64 * dt);
            KnotState {
                q: exp_map(&att),
                p,
                b: bias,
            }
        })
        .collect();
    let truth = Trajectory::new(t0, dt, knots).expect("positive duration");
    let calib = cfg.true_calibration();

    let centre = calib.world_to_uwb(&Vec3::zeros());
    let h = Vec3::from(cfg.anchor_half_extent);
    let mut anchors = AnchorMap::default();
    for (i, corner) in (0..8).enumerate() {
        let s = |bit: usize| if corner & bit != 0 { 1.0 } else { -1.0 };
        let offset = Vec3::new(s(1) * h.x, s(2) * h.y, s(4) * h.z + h.z * 0.4);
        anchors.insert(format!("A{i}"), centre + offset);
    }
    let ids: Vec<String> = anchors.ids().map(str::to_string).collect();

    let noise = |rng: &mut ChaCha8Rng, sigma: f64| -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
        } else {
            0.0
        }
    };

    let n_imu = (cfg.duration * cfg.imu_rate).floor() as usize + 1;
    let imu = (0..n_imu)
        .map(|i| {
            let t = i as f64 / cfg.imu_rate;
            let s = truth.sample(t).expect("inside truth span");
            let accel = s.q.inverse().rotate(&(s.a + calib.gravity())) + s.bias.fixed_rows::<3>(0);
            let gyro = s.omega_body + s.bias.fixed_rows::<3>(3);
            ImuMeasurement {
                t,
                accel: accel + Vec3::from_fn(|_, _| noise(&mut rng, cfg.accel_sigma)),
                gyro: gyro + Vec3::from_fn(|_, _| noise(&mut rng, cfg.gyro_sigma)),
            }
        })
        .collect();

    let n_uwb = (cfg.duration * cfg.uwb_rate).floor() as usize + 1;
    let mut outliers = Vec::new();
    let uwb = (0..n_uwb)
        .map(|i| {
            // offset by half a period so UWB and IMU stamps interleave
            let t = ((i as f64 + 0.5) / cfg.uwb_rate).min(cfg.duration);
            let s = truth.sample(t).expect("inside truth span");
            let tag = calib.world_to_uwb(&(s.p + s.q.rotate(&calib.tag_offset)));
            let mut err = noise(&mut rng, cfg.uwb_sigma);
            if cfg.outlier_rate > 0.0 && rng.random_bool(cfg.outlier_rate.min(1.0)) {
                err += rng.random_range(cfg.outlier_min..=cfg.outlier_max);
                outliers.push(i);
            }
            let a = &ids[i % ids.len()];
            let range = |id: &str| (tag - anchors.get(id).expect("known anchor")).norm();
            match cfg.range_mode {
                RangeMode::Toa => Measurement::Toa(UwbToaMeasurement {
                    t,
                    anchor: a.clone(),
                    range: range(a) + err,
                }),
                RangeMode::Tdoa => {
                    let b = &ids[(i + 1) % ids.len()];
                    Measurement::Tdoa(UwbTdoaMeasurement {
                        t,
                        anchor_i: a.clone(),
                        anchor_j: b.clone(),
                        ddist: range(a) - range(b) + err,
                    })
                }
            }
        })
        .collect();

    let n_gt = (cfg.duration * 200.0).floor() as usize + 1;
    let groundtruth = (0..n_gt)
        .map(|i| truth.sample(i as f64 / 200.0).expect("inside truth span"))
        .collect();

    Scenario {
        truth,
        calibration: calib,
        anchors,
        imu,
        uwb,
        outliers,
        groundtruth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residuals::uwb_innovation;

    #[test]
    fn zero_noise_orientation_measurements_reproduce_the_spline() {
        let cfg = OrientationSynthConfig {
            orientation_sigma: 0.0,
            gyro_sigma: 0.0,
            base_knots: 10,
            ..Default::default()
        };
        let seq = synth_orientation_sequence(&cfg);
        for (o, w) in seq.orientations.iter().zip(&seq.rates) {
            assert_eq!(o.q, seq.truth.orientation(o.t).unwrap());
            assert_eq!(w.omega, seq.truth.angular_velocity(w.t).unwrap());
        }
    }

    #[test]
    fn orientation_sequence_is_deterministic_and_scales() {
        let cfg = OrientationSynthConfig::default();
        assert_eq!(synth_orientation_sequence(&cfg), synth_orientation_sequence(&cfg));
        let x1 = synth_orientation_sequence(&cfg);
        let x5 = synth_orientation_sequence(&OrientationSynthConfig { scale: 5, ..cfg });
        assert_eq!(x5.truth.knots().len(), 5 * x1.truth.knots().len());
        assert_eq!(x5.orientations.len(), 5 * x1.orientations.len());
        assert_eq!(x5.rates.len(), 5 * x1.rates.len());
    }

    #[test]
    fn static_noise_free_accel_is_rotated_gravity() {
        let cfg = ScenarioConfig {
            shape: Shape::Static,
            duration: 2.0,
            bias_accel: [0.0; 3],
            bias_gyro: [0.0; 3],
            ..Default::default()
        }
        .noise_free();
        let sc = synth_fusion_scenario(&cfg);
        let g = sc.calibration.gravity();
        for m in &sc.imu {
            assert!((m.accel - g).amax() < 1e-12);
            assert!(m.gyro.amax() < 1e-12);
        }
    }

    #[test]
    fn outlier_rate_is_respected() {
        let cfg = ScenarioConfig {
            outlier_rate: 0.05,
            duration: 60.0,
            uwb_sigma: 0.0,
            ..Default::default()
        };
        let sc = synth_fusion_scenario(&cfg);
        let n = sc.uwb.len() as f64;
        let k = sc.outliers.len() as f64;
        let sd = (n * 0.05 * 0.95).sqrt();
        assert!((k - 0.05 * n).abs() < 4.0 * sd, "{k} of {n}");
        for (i, m) in sc.uwb.iter().enumerate() {
            let e = uwb_innovation(&sc.truth, m, &sc.calibration, &sc.anchors).unwrap();
            if sc.outliers.contains(&i) {
                assert!((-3.0 - 1e-9..=-1.0 + 1e-9).contains(&e), "{e}");
            } else {
                assert!(e.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn truth_starts_at_rest_at_identity() {
        let sc = synth_fusion_scenario(&ScenarioConfig::default());
        let k0 = sc.truth.knots()[0];
        assert_eq!(k0.q, UnitQuat::identity());
        assert_eq!(k0.p, Vec3::zeros());
        assert_eq!(sc.groundtruth.len(), 4001);
        assert!(merge_streams(&sc.imu, &sc.uwb).windows(2).all(|w| w[0].t() <= w[1].t()));
    }
}
