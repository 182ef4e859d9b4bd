//! Whitened residual assembly for the UWB-inertial window objective.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::residuals::{
    accel_residual, bias_residual, gyro_residual, tdoa_residual, toa_residual, AnchorMap, Calibration, ImuMeasurement,
    Linearization, Measurement, ResidualKind, Whitening,
};
use crate::trajectory::{KnotState, Trajectory};

use super::layout::ParameterLayout;
use super::lm::Problem;
use super::normal::NormalSystem;

/// Measurements entering one window solve.
#[derive(Clone, Debug, Default)]
pub struct WindowData<'a> {
    pub imu: Vec<&'a ImuMeasurement>,
    /// Time-of-arrival or time-difference ranges that passed the gate.
    pub uwb: Vec<&'a Measurement>,
    /// Consecutive IMU timestamps tied by a bias random-walk residual.
    pub bias_pairs: Vec<(f64, f64)>,
}

impl WindowData<'_> {
    pub fn len(&self) -> usize {
        self.imu.len() + self.uwb.len() + self.bias_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whitened linearizations of every residual; measurements without support
/// in the trajectory or with degenerate geometry are skipped and counted.
pub fn linearize_all(
    traj: &Trajectory,
    calib: &Calibration,
    anchors: &AnchorMap,
    data: &WindowData<'_>,
    whitening: &Whitening,
) -> Result<(Vec<Linearization>, usize)> {
    let mut out = Vec::with_capacity(2 * data.imu.len() + data.uwb.len() + data.bias_pairs.len());
    let mut skipped = 0;
    let mut push = |r: Result<Linearization>, kind| match r {
        Ok(mut lin) => {
            whitening.apply(&mut lin, kind);
            out.push(lin);
            Ok(())
        }
        Err(Error::OutOfWindow(_) | Error::DegenerateGeometry(_)) => {
            skipped += 1;
            Ok(())
        }
        Err(e) => Err(e),
    };
    for m in &data.uwb {
        let r = match m {
            Measurement::Toa(m) => toa_residual(traj, m, calib, anchors),
            Measurement::Tdoa(m) => tdoa_residual(traj, m, calib, anchors),
            Measurement::Imu(m) => {
                return Err(Error::InvalidConfig(format!(
                    "IMU sample at t = {} in the UWB list",
                    m.t
                )))
            }
        };
        push(r, ResidualKind::Uwb)?;
    }
    for m in &data.imu {
        push(accel_residual(traj, m, calib), ResidualKind::Accel)?;
        push(gyro_residual(traj, m), ResidualKind::Gyro)?;
    }
    for &(t0, t1) in &data.bias_pairs {
        push(bias_residual(traj, t0, t1), ResidualKind::Bias)?;
    }
    Ok((out, skipped))
}

/// Normal equations of the window objective under `layout`, plus the
/// number of skipped measurements.
pub fn assemble(
    traj: &Trajectory,
    calib: &Calibration,
    anchors: &AnchorMap,
    data: &WindowData<'_>,
    whitening: &Whitening,
    layout: &ParameterLayout,
) -> Result<(NormalSystem, usize)> {
    let (lins, skipped) = linearize_all(traj, calib, anchors, data, whitening)?;
    Ok((NormalSystem::from_linearizations(layout, &lins), skipped))
}

/// Stacked whitened residual vector.
pub fn residual_vector(
    traj: &Trajectory,
    calib: &Calibration,
    anchors: &AnchorMap,
    data: &WindowData<'_>,
    whitening: &Whitening,
) -> Result<DVector<f64>> {
    let (lins, _) = linearize_all(traj, calib, anchors, data, whitening)?;
    let values: Vec<f64> = lins.iter().flat_map(|l| l.residual.iter().copied()).collect();
    Ok(DVector::from_vec(values))
}

/// The window objective as an LM problem over the free blocks of `layout`.
pub struct FusionProblem<'a, 'd> {
    pub traj: &'a mut Trajectory,
    pub calib: &'a mut Calibration,
    pub anchors: &'a AnchorMap,
    pub data: &'a WindowData<'d>,
    pub whitening: &'a Whitening,
    pub layout: ParameterLayout,
    /// Measurements skipped in the latest linearization.
    pub skipped: usize,
}

impl Problem for FusionProblem<'_, '_> {
    type Snapshot = (Vec<KnotState>, Calibration);

    fn linearize(&mut self) -> Result<NormalSystem> {
        let (sys, skipped) = assemble(
            self.traj,
            self.calib,
            self.anchors,
            self.data,
            self.whitening,
            &self.layout,
        )?;
        self.skipped = skipped;
        Ok(sys)
    }

    fn retract(&mut self, step: &DVector<f64>) {
        self.layout.retract(self.traj, self.calib, step);
    }

    fn snapshot(&self) -> Self::Snapshot {
        let first = self.layout.first_knot();
        (self.traj.knots()[first..].to_vec(), self.calib.clone())
    }

    fn restore(&mut self, (knots, calib): Self::Snapshot) {
        let first = self.layout.first_knot();
        self.traj.knots_mut()[first..].copy_from_slice(&knots);
        *self.calib = calib;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_quat;
    use crate::quat::exp_map;
    use crate::residuals::{NoiseModel, UwbTdoaMeasurement, UwbToaMeasurement};
    use crate::solver::layout::KnotBlocks;
    use crate::solver::lm::{solve, SolverConfig};
    use crate::trajectory::Vec6;
    use crate::Vec3;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Toy {
        traj: Trajectory,
        calib: Calibration,
        anchors: AnchorMap,
        imu: Vec<ImuMeasurement>,
        uwb: Vec<Measurement>,
    }

    fn toy(rng: &mut ChaCha8Rng, knots: usize) -> Toy {
        let mut q = random_quat(rng);
        let states = (0..knots)
            .map(|i| {
                q = q.boxplus(&Vec3::from_fn(|_, _| rng.random_range(-0.2..0.2)));
                KnotState {
                    q,
                    p: Vec3::new(i as f64 * 0.1, 0.3, 1.0) + Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
                    b: Vec6::from_fn(|_, _| rng.random_range(-0.05..0.05)),
                }
            })
            .collect();
        let traj = Trajectory::new(0.0, 0.1, states).unwrap();
        let mut anchors = AnchorMap::default();
        for (i, p) in [[5.0, 5.0, 3.0], [-5.0, 5.0, 0.0], [5.0, -5.0, 0.5], [-5.0, -5.0, 3.0]]
            .iter()
            .enumerate()
        {
            anchors.insert(format!("a{i}"), Vec3::from(*p));
        }
        let calib = Calibration {
            q_wu: exp_map(&Vec3::new(0.0, 0.0, 0.2)),
            t_wu: Vec3::new(0.5, -0.2, 0.1),
            g_dir: Vec3::new(0.1, 0.0, 1.0).normalize(),
            tag_offset: Vec3::new(0.05, 0.0, 0.1),
            ..Default::default()
        };
        let (lo, hi) = traj.grid().valid_span();
        let n = ((hi - lo) / 0.02) as usize;
        let imu = (0..n)
            .map(|i| ImuMeasurement {
                t: lo + 0.02 * i as f64,
                accel: Vec3::new(0.1, 0.2, 9.7),
                gyro: Vec3::new(0.01, -0.02, 0.03),
            })
            .collect();
        let uwb = (0..n)
            .map(|i| {
                let t = lo + 0.02 * i as f64 + 0.005;
                if i % 2 == 0 {
                    Measurement::Toa(UwbToaMeasurement {
                        t,
                        anchor: format!("a{}", i % 4),
                        range: 7.0,
                    })
                } else {
                    Measurement::Tdoa(UwbTdoaMeasurement {
                        t,
                        anchor_i: format!("a{}", i % 4),
                        anchor_j: format!("a{}", (i + 1) % 4),
                        ddist: 0.3,
                    })
                }
            })
            .collect();
        Toy {
            traj,
            calib,
            anchors,
            imu,
            uwb,
        }
    }

    fn data(toy: &Toy) -> WindowData<'_> {
        WindowData {
            imu: toy.imu.iter().collect(),
            uwb: toy.uwb.iter().collect(),
            bias_pairs: toy.imu.windows(2).map(|w| (w[0].t, w[1].t)).collect(),
        }
    }

    #[test]
    fn band_assembly_matches_dense_finite_difference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let toy = toy(&mut rng, 6);
        let data = data(&toy);
        let mut noise = NoiseModel::isotropic(0.5, 0.8, 0.3, 0.5, 0.2);
        noise.weight_uwb = 2.0;
        let white = noise.whitening().unwrap();
        for layout in [
            ParameterLayout::new(0, 6, KnotBlocks::FULL).with_calibration(true),
            ParameterLayout::with_pinned(1, 5, KnotBlocks::FULL, Some(1)).with_calibration(true),
            ParameterLayout::new(2, 4, KnotBlocks::FULL),
        ] {
            let (sys, skipped) = assemble(&toy.traj, &toy.calib, &toy.anchors, &data, &white, &layout).unwrap();
            assert_eq!(skipped, 0);
            let r0 = residual_vector(&toy.traj, &toy.calib, &toy.anchors, &data, &white).unwrap();
            let h = 1e-6;
            let mut jac = DMatrix::zeros(r0.len(), layout.dim());
            for c in 0..layout.dim() {
                let eval = |s: f64| {
                    let (mut tr, mut ca) = (toy.traj.clone(), toy.calib.clone());
                    let mut step = DVector::zeros(layout.dim());
                    step[c] = s;
                    layout.retract(&mut tr, &mut ca, &step);
                    residual_vector(&tr, &ca, &toy.anchors, &data, &white).unwrap()
                };
                jac.set_column(c, &((eval(h) - eval(-h)) / (2.0 * h)));
            }
            let h_oracle = jac.transpose() * &jac;
            let g_oracle = jac.transpose() * &r0;
            let scale = h_oracle.amax();
            assert!((sys.to_dense() - h_oracle).amax() < 1e-8 * scale);
            assert!((sys.g.clone() - g_oracle).amax() < 1e-8 * scale.sqrt() * r0.amax().max(1.0));
            assert!((sys.cost - r0.norm_squared()).abs() < 1e-12 * sys.cost);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut toy = toy(&mut rng, 6);
        // replace measurements by exact predictions
        let white = NoiseModel::isotropic(0.1, 0.1, 0.1, 0.1, 0.1).whitening().unwrap();
        for m in toy.imu.iter_mut() {
            let s = toy.traj.sample(m.t).unwrap();
            m.accel = s.q.inverse().rotate(&(s.a + toy.calib.gravity())) + s.bias.fixed_rows::<3>(0);
            m.gyro = s.omega_body + s.bias.fixed_rows::<3>(3);
        }
        for m in toy.uwb.iter_mut() {
            let e = crate::residuals::uwb_innovation(&toy.traj, m, &toy.calib, &toy.anchors).unwrap();
            match m {
                Measurement::Toa(m) => m.range += e,
                Measurement::Tdoa(m) => m.ddist += e,
                _ => unreachable!(),
            }
        }
        let data = WindowData {
            imu: toy.imu.iter().collect(),
            uwb: toy.uwb.iter().collect(),
            bias_pairs: vec![],
        };
        let layout = ParameterLayout::new(0, 6, KnotBlocks::FULL).with_calibration(true);
        let (sys, _) = assemble(&toy.traj, &toy.calib, &toy.anchors, &data, &white, &layout).unwrap();
        assert!(sys.cost < 1e-20);
        assert!(sys.g.amax() < 1e-8);
    }

    #[test]
    fn out_of_window_measurements_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut toy = toy(&mut rng, 6);
        toy.imu.push(ImuMeasurement {
            t: 100.0,
            accel: Vec3::zeros(),
            gyro: Vec3::zeros(),
        });
        let white = NoiseModel::isotropic(0.1, 0.1, 0.1, 0.1, 0.1).whitening().unwrap();
        let d = data(&toy);
        let layout = ParameterLayout::new(0, 6, KnotBlocks::FULL);
        let (_, skipped) = assemble(&toy.traj, &toy.calib, &toy.anchors, &d, &white, &layout).unwrap();
        assert_eq!(skipped, 3);
    }

    #[test]
    fn gyro_only_problem_has_a_gauge_but_damped_steps_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut toy = toy(&mut rng, 8);
        let white = NoiseModel::isotropic(0.1, 0.1, 0.1, 0.1, 0.1).whitening().unwrap();
        let imu: Vec<ImuMeasurement> = toy.imu.clone();
        let gyro_cost = |traj: &Trajectory| -> f64 {
            imu.iter()
                .map(|m| {
                    crate::residuals::gyro_residual(traj, m)
                        .unwrap()
                        .residual
                        .norm_squared()
                })
                .sum()
        };
        let offset = exp_map(&Vec3::new(0.3, -0.2, 0.5));
        let mut rotated = toy.traj.clone();
        for k in rotated.knots_mut() {
            k.q = offset * k.q;
        }
        assert!((gyro_cost(&toy.traj) - gyro_cost(&rotated)).abs() < 1e-9 * gyro_cost(&toy.traj));

        let layout = ParameterLayout::new(0, 8, KnotBlocks::ROTATION);
        let lins: Vec<Linearization> = imu
            .iter()
            .map(|m| {
                let mut l = crate::residuals::gyro_residual(&toy.traj, m).unwrap();
                white.apply(&mut l, ResidualKind::Gyro);
                l
            })
            .collect();
        let sys = NormalSystem::from_linearizations(&layout, &lins);
        let min_eig = sys.to_dense().symmetric_eigenvalues().min();
        assert!(min_eig.abs() < 1e-6 * sys.to_dense().amax());
        let step = sys.solve_damped(SolverConfig::default().lambda_init).unwrap();
        assert!(step.iter().all(|x| x.is_finite()));

        // and a full LM run on the gauge-deficient problem terminates
        struct GyroOnly<'a> {
            traj: &'a mut Trajectory,
            imu: &'a [ImuMeasurement],
            layout: ParameterLayout,
            white: Whitening,
        }
        impl Problem for GyroOnly<'_> {
            type Snapshot = Vec<KnotState>;
            fn linearize(&mut self) -> Result<NormalSystem> {
                let lins: Vec<Linearization> = self
                    .imu
                    .iter()
                    .map(|m| {
                        let mut l = crate::residuals::gyro_residual(self.traj, m).unwrap();
                        self.white.apply(&mut l, ResidualKind::Gyro);
                        l
                    })
                    .collect();
                Ok(NormalSystem::from_linearizations(&self.layout, &lins))
            }
            fn retract(&mut self, step: &DVector<f64>) {
                let mut c = Calibration::default();
                self.layout.retract(self.traj, &mut c, step);
            }
            fn snapshot(&self) -> Vec<KnotState> {
                self.traj.knots().to_vec()
            }
            fn restore(&mut self, s: Vec<KnotState>) {
                self.traj.knots_mut().copy_from_slice(&s);
            }
        }
        let mut p = GyroOnly {
            traj: &mut toy.traj,
            imu: &imu,
            layout,
            white,
        };
        let stats = solve(&mut p, &SolverConfig::default()).unwrap();
        assert!(stats.final_cost < stats.initial_cost);
        for k in toy.traj.knots() {
            assert!((k.q.coords().norm() - 1.0).abs() < 1e-9);
        }
    }
}
