//! Finite-difference verification of every analytic Jacobian.
//!
//! Each suite draws random instances, perturbs inputs in their tangent
//! space (`q ⊗ Exp(φ)` for quaternions, the S² tangent basis for gravity,
//! plain addition elsewhere) with central differences, and reports the
//! worst relative error against the analytic Jacobian.

use nalgebra::{DMatrix, DVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

use crate::bspline::{
    interp_acc, interp_vec, interp_vel, jac_acc_knots, jac_vec_knots, jac_vel_knots, BasisWeights, QuatSegment,
};
use crate::quat::{exp_map, jac_exp, jac_log, jac_rotate, tangent_lift, UnitQuat, Vec3};
use crate::residuals::{
    accel_residual, bias_residual, gyro_residual, retract_block, tdoa_residual, toa_residual, AnchorMap, Calibration,
    ImuMeasurement, Linearization, UwbTdoaMeasurement, UwbToaMeasurement,
};
use crate::trajectory::{KnotState, Trajectory, Vec6};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 200;
/// Central-difference step, near the cube root of machine epsilon where
/// truncation and rounding errors balance.
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.instances > 0 && self.max_rel_err < self.tolerance
    }
}

/// Relative error of `analytic` against `numeric`, normalized by the larger
/// of the block norm and 1e-3 of the full Jacobian norm so that blocks with
/// vanishing basis weight are not judged on round-off alone.
fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, full_norm: f64) -> f64 {
    let scale = numeric.norm().max(1e-3 * full_norm).max(1e-12);
    (analytic - numeric).norm() / scale
}

/// Central differences of `f` over `dim` tangent directions applied by `perturb`.
fn central_diff<S: Clone>(
    base: &S,
    dim: usize,
    perturb: impl Fn(&mut S, &[f64]),
    f: impl Fn(&S) -> DVector<f64>,
) -> DMatrix<f64> {
    let m = f(base).len();
    let mut out = DMatrix::zeros(m, dim);
    let mut delta = vec![0.0; dim];
    for c in 0..dim {
        delta.iter_mut().for_each(|d| *d = 0.0);
        delta[c] = STEP;
        let mut plus = base.clone();
        perturb(&mut plus, &delta);
        delta[c] = -STEP;
        let mut minus = base.clone();
        perturb(&mut minus, &delta);
        out.set_column(c, &((f(&plus) - f(&minus)) / (2.0 * STEP)));
    }
    out
}

fn dvec(s: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(s)
}

fn dmat<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<f64, R, C>>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

fn v3(d: &[f64]) -> Vec3 {
    Vec3::from_column_slice(d)
}

pub fn random_quat(rng: &mut impl Rng) -> UnitQuat {
    let c: Vector4<f64> = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
    UnitQuat::from_coords(c)
}

fn random_vec3(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-scale..scale))
}

fn random_tangent(rng: &mut impl Rng, max_norm: f64) -> Vec3 {
    let dir: [f64; 3] = UnitSphere.sample(rng);
    Vec3::from(dir) * rng.random_range(0.0..max_norm)
}

/// Seven knots with moderate inter-knot rotations and a random valid time.
struct Instance {
    traj: Trajectory,
    calib: Calibration,
    anchors: AnchorMap,
    t: f64,
}

fn random_instance(rng: &mut impl Rng) -> Instance {
    let dt = rng.random_range(0.05..0.3);
    let t0 = rng.random_range(-5.0..5.0);
    let mut q = random_quat(rng);
    let knots = (0..7)
        .map(|_| {
            q = q.boxplus(&random_tangent(rng, 0.6));
            KnotState {
                q,
                p: random_vec3(rng, 3.0),
                b: Vec6::from_fn(|_, _| rng.random_range(-0.2..0.2)),
            }
        })
        .collect();
    let traj = Trajectory::new(t0, dt, knots).expect("seven knots form a valid grid");
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let calib = Calibration {
        q_wu: random_quat(rng),
        t_wu: random_vec3(rng, 2.0),
        g_dir: Vec3::from(dir),
        g_mag: 9.81,
        tag_offset: if rng.random_bool(0.25) {
            Vec3::zeros()
        } else {
            random_vec3(rng, 0.3)
        },
    };
    let mut anchors = AnchorMap::default();
    for i in 0..4 {
        let dir: [f64; 3] = UnitSphere.sample(rng);
        anchors.insert(format!("a{i}"), Vec3::from(dir) * rng.random_range(8.0..15.0));
    }
    let (lo, hi) = traj.grid().valid_span();
    let t = rng.random_range(lo..hi);
    Instance {
        traj,
        calib,
        anchors,
        t,
    }
}

/// Compares every block of `lin` against differences of `eval`.
fn check_linearization(
    lin: &Linearization,
    traj: &Trajectory,
    calib: &Calibration,
    eval: impl Fn(&Trajectory, &Calibration) -> DVector<f64>,
) -> f64 {
    let full = lin.jacobian().norm();
    let mut worst: f64 = 0.0;
    for &(block, _) in lin.blocks() {
        let numeric = central_diff(
            &(traj.clone(), calib.clone()),
            block.dim(),
            |(tr, ca), d| retract_block(tr, ca, block, d),
            |(tr, ca)| eval(tr, ca),
        );
        let analytic = lin.block(block).expect("block listed");
        worst = worst.max(rel_err(&analytic, &numeric, full));
    }
    worst
}

fn run_suite(
    name: &'static str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut one: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> SuiteReport {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let e = one(rng);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    SuiteReport {
        name,
        instances,
        max_rel_err: worst,
        tolerance: DEFAULT_TOLERANCE,
    }
}

fn quat_suites(n: usize, rng: &mut ChaCha8Rng) -> Vec<SuiteReport> {
    let mut out = Vec::new();
    out.push(run_suite("jac_exp", n, rng, |rng| {
        // include the small-angle series branch
        let v = if rng.random_bool(0.2) {
            random_tangent(rng, 1e-4)
        } else {
            random_tangent(rng, 3.0)
        };
        let numeric = central_diff(&v, 3, |x, d| *x += v3(d), |x| dvec(exp_map(x).coords().as_slice()));
        let analytic = dmat(&jac_exp(&v));
        rel_err(&analytic, &numeric, analytic.norm())
    }));
    out.push(run_suite("jac_log", n, rng, |rng| {
        let q = if rng.random_bool(0.2) {
            exp_map(&random_tangent(rng, 1e-4))
        } else {
            exp_map(&random_tangent(rng, 3.0))
        };
        let numeric = central_diff(&q, 3, |x, d| *x = x.boxplus(&v3(d)), |x| dvec(x.log().as_slice()));
        let analytic = dmat(&(jac_log(&q).expect("not antipodal") * tangent_lift(&q)));
        rel_err(&analytic, &numeric, analytic.norm())
    }));
    out.push(run_suite("jac_rotate", n, rng, |rng| {
        let q = random_quat(rng);
        let x = random_vec3(rng, 5.0);
        let numeric = central_diff(&q, 3, |a, d| *a = a.boxplus(&v3(d)), |a| dvec(a.rotate(&x).as_slice()));
        let analytic = dmat(&(jac_rotate(&q, &x) * tangent_lift(&q)));
        rel_err(&analytic, &numeric, analytic.norm())
    }));
    out
}

fn random_weights(rng: &mut impl Rng) -> (BasisWeights, f64) {
    let dt = rng.random_range(0.05..0.3);
    (BasisWeights::new(2, rng.random_range(0.0..1.0), dt), dt)
}

fn bspline_suites(n: usize, rng: &mut ChaCha8Rng) -> Vec<SuiteReport> {
    let mut out = Vec::new();
    type Interp = fn(&[Vec3; 4], &BasisWeights) -> Vec3;
    type Coeffs = fn(&BasisWeights) -> [f64; 4];
    let vec_cases: [(&'static str, Interp, Coeffs); 3] = [
        ("jac_vec_knots", interp_vec::<3>, jac_vec_knots),
        ("jac_vel_knots", interp_vel::<3>, jac_vel_knots),
        ("jac_acc_knots", interp_acc::<3>, jac_acc_knots),
    ];
    for (name, interp, coeffs) in vec_cases {
        out.push(run_suite(name, n, rng, |rng| {
            let (w, _) = random_weights(rng);
            let knots: [Vec3; 4] = std::array::from_fn(|_| random_vec3(rng, 3.0));
            let c = coeffs(&w);
            let full = DMatrix::from_fn(3, 12, |r, col| if r == col % 3 { c[col / 3] } else { 0.0 });
            let numeric = central_diff(
                &knots,
                12,
                |k, d| {
                    for (j, kj) in k.iter_mut().enumerate() {
                        *kj += v3(&d[3 * j..3 * j + 3]);
                    }
                },
                |k| dvec(interp(k, &w).as_slice()),
            );
            rel_err(&full, &numeric, full.norm())
        }));
    }

    let random_quat_knots = |rng: &mut ChaCha8Rng| -> [UnitQuat; 4] {
        let mut q = random_quat(rng);
        std::array::from_fn(|_| {
            q = q.boxplus(&random_tangent(rng, 0.6));
            q
        })
    };
    let perturb_knots = |k: &mut [UnitQuat; 4], d: &[f64]| {
        for (j, kj) in k.iter_mut().enumerate() {
            *kj = kj.boxplus(&v3(&d[3 * j..3 * j + 3]));
        }
    };
    out.push(run_suite("jac_quat_knots", n, rng, |rng| {
        let (w, _) = random_weights(rng);
        let knots = random_quat_knots(rng);
        let seg = QuatSegment::new(&knots, &w);
        let raw = seg.jac_knots();
        let mut analytic = DMatrix::zeros(4, 12);
        for j in 0..4 {
            analytic
                .view_mut((0, 3 * j), (4, 3))
                .copy_from(&(raw[j] * tangent_lift(&knots[j])));
        }
        let numeric = central_diff(&knots, 12, perturb_knots, |k| {
            dvec(QuatSegment::new(k, &w).orientation().coords().as_slice())
        });
        rel_err(&analytic, &numeric, analytic.norm())
    }));
    out.push(run_suite("jac_angvel_knots", n, rng, |rng| {
        let (w, _) = random_weights(rng);
        let knots = random_quat_knots(rng);
        let seg = QuatSegment::new(&knots, &w);
        let raw = seg.jac_angvel_knots();
        let mut analytic = DMatrix::zeros(3, 12);
        for j in 0..4 {
            analytic
                .view_mut((0, 3 * j), (3, 3))
                .copy_from(&(raw[j] * tangent_lift(&knots[j])));
        }
        let numeric = central_diff(&knots, 12, perturb_knots, |k| {
            dvec(QuatSegment::new(k, &w).angular_velocity().as_slice())
        });
        rel_err(&analytic, &numeric, analytic.norm())
    }));
    out
}

fn residual_suites(n: usize, rng: &mut ChaCha8Rng) -> Vec<SuiteReport> {
    let mut out = Vec::new();
    out.push(run_suite("toa_residual", n, rng, |rng| {
        let inst = random_instance(rng);
        let m = UwbToaMeasurement {
            t: inst.t,
            anchor: format!("a{}", rng.random_range(0..4)),
            range: rng.random_range(5.0..15.0),
        };
        let lin = toa_residual(&inst.traj, &m, &inst.calib, &inst.anchors).expect("valid instance");
        check_linearization(&lin, &inst.traj, &inst.calib, |tr, ca| {
            toa_residual(tr, &m, ca, &inst.anchors)
                .expect("valid instance")
                .residual
        })
    }));
    out.push(run_suite("tdoa_residual", n, rng, |rng| {
        let inst = random_instance(rng);
        let i = rng.random_range(0..4);
        let m = UwbTdoaMeasurement {
            t: inst.t,
            anchor_i: format!("a{i}"),
            anchor_j: format!("a{}", (i + 1) % 4),
            ddist: rng.random_range(-2.0..2.0),
        };
        let lin = tdoa_residual(&inst.traj, &m, &inst.calib, &inst.anchors).expect("valid instance");
        check_linearization(&lin, &inst.traj, &inst.calib, |tr, ca| {
            tdoa_residual(tr, &m, ca, &inst.anchors)
                .expect("valid instance")
                .residual
        })
    }));
    let random_imu = |rng: &mut ChaCha8Rng, t: f64| ImuMeasurement {
        t,
        accel: random_vec3(rng, 10.0),
        gyro: random_vec3(rng, 2.0),
    };
    out.push(run_suite("accel_residual", n, rng, |rng| {
        let inst = random_instance(rng);
        let m = random_imu(rng, inst.t);
        let lin = accel_residual(&inst.traj, &m, &inst.calib).expect("valid instance");
        check_linearization(&lin, &inst.traj, &inst.calib, |tr, ca| {
            accel_residual(tr, &m, ca).expect("valid instance").residual
        })
    }));
    out.push(run_suite("gyro_residual", n, rng, |rng| {
        let inst = random_instance(rng);
        let m = random_imu(rng, inst.t);
        let lin = gyro_residual(&inst.traj, &m).expect("valid instance");
        check_linearization(&lin, &inst.traj, &inst.calib, |tr, _| {
            gyro_residual(tr, &m).expect("valid instance").residual
        })
    }));
    out.push(run_suite("bias_residual", n, rng, |rng| {
        let inst = random_instance(rng);
        let (_, hi) = inst.traj.grid().valid_span();
        let t1 = (inst.t + rng.random_range(0.0..0.05)).min(hi);
        let lin = bias_residual(&inst.traj, inst.t, t1).expect("valid instance");
        check_linearization(&lin, &inst.traj, &inst.calib, |tr, _| {
            bias_residual(tr, inst.t, t1).expect("valid instance").residual
        })
    }));
    out
}

/// Runs every suite with `instances` random draws each.
pub fn run_all(instances: usize, seed: u64) -> Vec<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = quat_suites(instances, &mut rng);
    out.extend(bspline_suites(instances, &mut rng));
    out.extend(residual_suites(instances, &mut rng));
    out
}
