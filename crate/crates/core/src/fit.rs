//! Batch fitting of a rotation spline to orientation and angular-velocity
//! samples.

use std::time::{Duration, Instant};

use nalgebra::DVector;

use crate::bspline::QuaternionSpline;
use crate::error::{Error, Result};
use crate::quat::{jac_log, UnitQuat};
use crate::residuals::{gyro_residual, Calibration, ImuMeasurement, Linearization, ParamBlock};
use crate::solver::{solve, KnotBlocks, NormalSystem, ParameterLayout, Problem, SolveStats, SolverConfig};
use crate::trajectory::{KnotState, Trajectory};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientationMeasurement {
    pub t: f64,
    pub q: UnitQuat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngVelMeasurement {
    pub t: f64,
    /// Body-frame angular velocity, rad/s.
    pub omega: Vec3,
}

/// `Log(q̂⁻¹ ⊗ r(t))`, taken on the hemisphere with non-negative scalar part.
pub fn orientation_residual(traj: &Trajectory, m: &OrientationMeasurement) -> Result<Linearization> {
    let w = traj.locate(m.t).map_err(|_| Error::OutOfWindow(m.t))?;
    let seg = traj.quat_segment(&w);
    let mut d = m.q.inverse() * seg.orientation();
    let sign = if d.w() < 0.0 {
        d = d.negated();
        -1.0
    } else {
        1.0
    };
    let mut lin = Linearization::new(DVector::from_column_slice(d.log().as_slice()));
    let outer = jac_log(&d)? * m.q.inverse().left_matrix() * sign;
    let jq = seg.jac_knots_tangent();
    for (k, j) in jq.iter().enumerate() {
        lin.add(ParamBlock::Rot(w.first_knot() + k), &(outer * j));
    }
    Ok(lin)
}

struct OrientationProblem<'a> {
    traj: Trajectory,
    orientations: &'a [OrientationMeasurement],
    rates: Vec<ImuMeasurement>,
    w_orient: f64,
    w_rate: f64,
    layout: ParameterLayout,
}

impl OrientationProblem<'_> {
    fn linearizations(&self) -> Result<Vec<Linearization>> {
        let mut out = Vec::with_capacity(self.orientations.len() + self.rates.len());
        for m in self.orientations {
            let mut lin = orientation_residual(&self.traj, m)?;
            lin.scale(self.w_orient);
            out.push(lin);
        }
        for m in &self.rates {
            let mut lin = gyro_residual(&self.traj, m)?;
            lin.scale(self.w_rate);
            out.push(lin);
        }
        Ok(out)
    }
}

impl Problem for OrientationProblem<'_> {
    type Snapshot = Vec<KnotState>;

    fn linearize(&mut self) -> Result<NormalSystem> {
        Ok(NormalSystem::from_linearizations(&self.layout, &self.linearizations()?))
    }

    fn retract(&mut self, step: &DVector<f64>) {
        let mut calib = Calibration::default();
        self.layout.retract(&mut self.traj, &mut calib, step);
    }

    fn snapshot(&self) -> Vec<KnotState> {
        self.traj.knots().to_vec()
    }

    fn restore(&mut self, s: Vec<KnotState>) {
        self.traj.knots_mut().copy_from_slice(&s);
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub spline: QuaternionSpline,
    pub stats: SolveStats,
    /// Wall time including initialization.
    pub elapsed: Duration,
}

/// `orientation_sigma` is the per-axis noise of the samples in the tangent
/// space of `Exp` (half-angle scale), `gyro_sigma` that of the rates in rad/s.
///
/// Initializes each knot from the orientation sample nearest to the time
/// where that knot carries the largest basis weight, then refines all
/// knots jointly.
pub fn fit_orientation(
    template: &QuaternionSpline,
    orientations: &[OrientationMeasurement],
    rates: &[AngVelMeasurement],
    orientation_sigma: f64,
    gyro_sigma: f64,
    solver: &SolverConfig,
) -> Result<FitResult> {
    let start = Instant::now();
    if orientations.is_empty() {
        return Err(Error::NoMeasurements);
    }
    if !(orientation_sigma > 0.0 && gyro_sigma > 0.0) {
        return Err(Error::NonSpdCovariance("orientation fit"));
    }
    let grid = *template.grid();
    let knots: Vec<KnotState> = (0..grid.count)
        .map(|k| {
            let t = grid.knot_time(k + 1);
            let i = orientations.partition_point(|m| m.t < t).min(orientations.len() - 1);
            let nearest = if i > 0 && (orientations[i - 1].t - t).abs() < (orientations[i].t - t).abs() {
                i - 1
            } else {
                i
            };
            KnotState {
                q: orientations[nearest].q,
                ..Default::default()
            }
        })
        .collect();
    let traj = Trajectory::new(grid.t0, grid.dt, knots)?;
    let rates = rates
        .iter()
        .map(|m| ImuMeasurement {
            t: m.t,
            accel: Vec3::zeros(),
            gyro: m.omega,
        })
        .collect();
    let mut problem = OrientationProblem {
        traj,
        orientations,
        rates,
        w_orient: 1.0 / orientation_sigma,
        w_rate: 1.0 / gyro_sigma,
        layout: ParameterLayout::new(0, grid.count, KnotBlocks::ROTATION),
    };
    let stats = solve(&mut problem, solver)?;
    let spline = QuaternionSpline::new(grid, problem.traj.knots().iter().map(|k| k.q).collect())?;
    Ok(FitResult {
        spline,
        stats,
        elapsed: start.elapsed(),
    })
}

/// RMSE of the geodesic angle `2‖Log(a⁻¹ ⊗ b)‖` over `times`.
pub fn so3_rmse(a: &QuaternionSpline, b: &QuaternionSpline, times: &[f64]) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::NoOverlap);
    }
    let mut sum = 0.0;
    for &t in times {
        sum += a.orientation(t)?.angle_to(&b.orientation(t)?).powi(2);
    }
    Ok((sum / times.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{synth_orientation_sequence, OrientationSynthConfig};

    #[test]
    fn orientation_residual_jacobian_matches_differences() {
        let cfg = OrientationSynthConfig {
            base_knots: 8,
            ..Default::default()
        };
        let seq = synth_orientation_sequence(&cfg);
        let knots = seq
            .truth
            .knots()
            .iter()
            .map(|&q| KnotState {
                q,
                ..Default::default()
            })
            .collect();
        let traj = Trajectory::new(0.0, cfg.knot_dt, knots).unwrap();
        for m in seq.orientations.iter().step_by(7) {
            let lin = orientation_residual(&traj, m).unwrap();
            for &(block, _) in lin.blocks() {
                let an = lin.block(block).unwrap();
                for c in 0..3 {
                    let eval = |h: f64| {
                        let mut tr = traj.clone();
                        let mut d = [0.0; 3];
                        d[c] = h;
                        crate::residuals::retract_block(&mut tr, &mut Calibration::default(), block, &d);
                        orientation_residual(&tr, m).unwrap().residual
                    };
                    let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                    assert!((an.column(c) - fd).amax() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn noise_free_fit_recovers_truth() {
        let cfg = OrientationSynthConfig {
            orientation_sigma: 0.0,
            gyro_sigma: 0.0,
            base_knots: 20,
            rate: 100.0,
            ..Default::default()
        };
        let seq = synth_orientation_sequence(&cfg);
        let fit = fit_orientation(
            &seq.truth,
            &seq.orientations,
            &seq.rates,
            1e-2,
            1e-2,
            &SolverConfig::default(),
        )
        .unwrap();
        let times: Vec<f64> = seq.orientations.iter().map(|m| m.t).collect();
        assert!(so3_rmse(&fit.spline, &seq.truth, &times).unwrap() < 1e-8);
    }
}
