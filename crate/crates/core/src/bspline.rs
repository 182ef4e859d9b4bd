//! Uniform cubic cumulative B-splines over Rⁿ and over unit quaternions.
//!
//! A timestamp `t ∈ [t_i, t_{i+1})` is interpolated from the four local knots
//! `i-2 ..= i+1` through the cumulative basis
//! `λ(u) = Φ·[1, u, u², u³]ᵀ`, where `u = (t - t_i)/Δ`.
//!
//! Evaluation is split in two steps: [`KnotGrid::locate`] produces
//! [`BasisWeights`] once per timestamp, and the free functions / [`QuatSegment`]
//! consume them together with the four local knots. Jacobians are returned as
//! dense per-knot blocks; global assembly happens in the solver.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, SVector};

use crate::error::{Error, Result};
use crate::quat::{conjugation_matrix, exp_map, jac_exp, jac_log_unchecked, jac_rotate, tangent_lift, UnitQuat, Vec3};

/// Cumulative basis matrix, rows give λ₁..λ₃ as polynomials in u.
const PHI: [[f64; 4]; 3] = [
    [5.0 / 6.0, 3.0 / 6.0, -3.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 3.0 / 6.0, 3.0 / 6.0, -2.0 / 6.0],
    [0.0, 0.0, 0.0, 1.0 / 6.0],
];

fn phi_times(p: [f64; 4]) -> Vec3 {
    Vec3::from_fn(|r, _| PHI[r].iter().zip(p).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnotGrid {
    pub t0: f64,
    pub dt: f64,
    pub count: usize,
}

impl KnotGrid {
    pub fn new(t0: f64, dt: f64, count: usize) -> Result<Self> {
        if !(dt > 0.0) || !t0.is_finite() {
            return Err(Error::InvalidConfig(format!("knot interval must be > 0, got {dt}")));
        }
        if count < 4 {
            return Err(Error::InvalidConfig(format!(
                "a cubic spline needs at least 4 knots, got {count}"
            )));
        }
        Ok(Self { t0, dt, count })
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Closed interval `[t_2, t_{count-1}]` on which all four local knots exist.
    pub fn valid_span(&self) -> (f64, f64) {
        (self.knot_time(2), self.knot_time(self.count - 1))
    }

    pub fn contains(&self, t: f64) -> bool {
        let (a, b) = self.valid_span();
        t >= a && t <= b
    }

    /// Segment index and basis weights for `t`.
    ///
    /// Knot times map to the segment on their right (`u = 0`), except the last
    /// valid time which maps to the final segment with `u = 1`.
    pub fn locate(&self, t: f64) -> Result<BasisWeights> {
        let (start, end) = self.valid_span();
        if !(t >= start && t <= end) {
            return Err(Error::OutOfRange { t, start, end });
        }
        let s = (t - self.t0) / self.dt;
        let mut seg = s.floor() as usize;
        seg = seg.clamp(2, self.count - 2);
        let u = (s - seg as f64).clamp(0.0, 1.0);
        Ok(BasisWeights::new(seg, u, self.dt))
    }
}

/// Cumulative basis values and their time derivatives at one timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisWeights {
    pub seg: usize,
    pub u: f64,
    pub lambda: Vec3,
    pub dlambda: Vec3,
    pub ddlambda: Vec3,
}

impl BasisWeights {
    pub fn new(seg: usize, u: f64, dt: f64) -> Self {
        let u2 = u * u;
        Self {
            seg,
            u,
            lambda: phi_times([1.0, u, u2, u2 * u]),
            dlambda: phi_times([0.0, 1.0, 2.0 * u, 3.0 * u2]) / dt,
            ddlambda: phi_times([0.0, 0.0, 2.0, 6.0 * u]) / (dt * dt),
        }
    }

    /// Global index of the first of the four supporting knots.
    pub fn first_knot(&self) -> usize {
        self.seg - 2
    }
}

/// Per-knot coefficients `1 - λ₁, λ₁ - λ₂, λ₂ - λ₃, λ₃` of a cumulative
/// combination of `weights`.
fn telescoped(weights: &Vec3, leading: f64) -> [f64; 4] {
    [
        leading - weights[0],
        weights[0] - weights[1],
        weights[1] - weights[2],
        weights[2],
    ]
}

/// `ds/dṕ_j` for the four local knots (each times the identity).
pub fn jac_vec_knots(w: &BasisWeights) -> [f64; 4] {
    telescoped(&w.lambda, 1.0)
}

pub fn jac_vel_knots(w: &BasisWeights) -> [f64; 4] {
    telescoped(&w.dlambda, 0.0)
}

/// `d s̈ / dṕ_j` for the four local knots.
pub fn jac_acc_knots(w: &BasisWeights) -> [f64; 4] {
    telescoped(&w.ddlambda, 0.0)
}

fn cumulative<const N: usize>(knots: &[SVector<f64, N>; 4], weights: &Vec3) -> SVector<f64, N> {
    (1..4).fold(SVector::zeros(), |acc, j| {
        acc + (knots[j] - knots[j - 1]) * weights[j - 1]
    })
}

pub fn interp_vec<const N: usize>(knots: &[SVector<f64, N>; 4], w: &BasisWeights) -> SVector<f64, N> {
    knots[0] + cumulative(knots, &w.lambda)
}

pub fn interp_vel<const N: usize>(knots: &[SVector<f64, N>; 4], w: &BasisWeights) -> SVector<f64, N> {
    cumulative(knots, &w.dlambda)
}

pub fn interp_acc<const N: usize>(knots: &[SVector<f64, N>; 4], w: &BasisWeights) -> SVector<f64, N> {
    cumulative(knots, &w.ddlambda)
}

/// Quaternion-spline evaluation on one segment, caching the intermediate
/// increments needed by the orientation and angular-velocity Jacobians.
#[derive(Clone, Debug)]
pub struct QuatSegment {
    knots: [UnitQuat; 4],
    lambda: Vec3,
    dlambda: Vec3,
    /// δ_j = Log(q́_{j-1}⁻¹ ⊗ q́_j), j = 1..3 stored at 0..2.
    deltas: [Vec3; 3],
    /// d_j = q́_{j-1}⁻¹ ⊗ q́_j.
    diffs: [UnitQuat; 3],
    /// e_j = Exp(λ_j δ_j).
    incs: [UnitQuat; 3],
    /// ω_0 = 0, ω_1, ω_2, ω_3.
    omegas: [Vec3; 4],
    r: UnitQuat,
}

impl QuatSegment {
    pub fn new(knots: &[UnitQuat; 4], w: &BasisWeights) -> Self {
        let diffs: [UnitQuat; 3] = std::array::from_fn(|j| knots[j].inverse() * knots[j + 1]);
        let deltas: [Vec3; 3] = std::array::from_fn(|j| diffs[j].log());
        let incs: [UnitQuat; 3] = std::array::from_fn(|j| exp_map(&(deltas[j] * w.lambda[j])));

        let mut r = knots[0];
        let mut omegas = [Vec3::zeros(); 4];
        for j in 0..3 {
            r = r * incs[j];
            omegas[j + 1] = incs[j].inverse().rotate(&omegas[j]) + deltas[j] * (2.0 * w.dlambda[j]);
        }
        Self {
            knots: *knots,
            lambda: w.lambda,
            dlambda: w.dlambda,
            deltas,
            diffs,
            incs,
            omegas,
            r,
        }
    }

    pub fn orientation(&self) -> UnitQuat {
        self.r
    }

    /// Body-frame angular velocity from the recursive form.
    pub fn angular_velocity(&self) -> Vec3 {
        self.omegas[3]
    }

    pub fn deltas(&self) -> &[Vec3; 3] {
        &self.deltas
    }

    /// ∂δ_j/∂q́ for the knot where δ_j ends (local index j) and where δ_{j+1}
    /// begins (local index j), as 3×4 blocks indexed by δ position 0..2.
    fn delta_jacobians(&self) -> ([Matrix3x4<f64>; 3], [Matrix3x4<f64>; 3]) {
        let d = conjugation_matrix();
        let end: [Matrix3x4<f64>; 3] =
            std::array::from_fn(|j| jac_log_unchecked(&self.diffs[j]) * self.knots[j].inverse().left_matrix());
        let start: [Matrix3x4<f64>; 3] =
            std::array::from_fn(|j| jac_log_unchecked(&self.diffs[j]) * self.knots[j + 1].right_matrix() * d);
        (end, start)
    }

    /// ∂r/∂q́_j for the four local knots, as 4×4 blocks on raw coordinates.
    pub fn jac_knots(&self) -> [Matrix4<f64>; 4] {
        let mut prefix = [self.knots[0]; 3];
        for j in 1..3 {
            prefix[j] = prefix[j - 1] * self.incs[j - 1];
        }
        let mut suffix = [UnitQuat::identity(); 4];
        for j in (0..3).rev() {
            suffix[j] = self.incs[j] * suffix[j + 1];
        }
        let dr_ddelta: [Matrix4x3<f64>; 3] = std::array::from_fn(|j| {
            prefix[j].left_matrix()
                * suffix[j + 1].right_matrix()
                * jac_exp(&(self.deltas[j] * self.lambda[j]))
                * self.lambda[j]
        });
        let (end, start) = self.delta_jacobians();

        let mut out = [Matrix4::zeros(); 4];
        out[0] = suffix[0].right_matrix();
        for j in 0..4 {
            if j != 0 {
                out[j] += dr_ddelta[j - 1] * end[j - 1];
            }
            if j != 3 {
                out[j] += dr_ddelta[j] * start[j];
            }
        }
        out
    }

    /// ∂r/∂φ_j for the local perturbations `q́_j ⊗ Exp(φ_j)`.
    pub fn jac_knots_tangent(&self) -> [Matrix4x3<f64>; 4] {
        let raw = self.jac_knots();
        std::array::from_fn(|j| raw[j] * tangent_lift(&self.knots[j]))
    }

    /// ∂ω/∂q́_j for the four local knots, as 3×4 blocks on raw coordinates.
    pub fn jac_angvel_knots(&self) -> [Matrix3x4<f64>; 4] {
        let d = conjugation_matrix();
        // ∂ω/∂ω_k for k = 1..3
        let r3 = self.incs[2].inverse().to_rotation_matrix();
        let r2 = self.incs[1].inverse().to_rotation_matrix();
        let propagate = [r3 * r2, r3, Matrix3::identity()];

        let domega_ddelta: [Matrix3<f64>; 3] = std::array::from_fn(|j| {
            let mut m = Matrix3::identity() * (2.0 * self.dlambda[j]);
            if j > 0 {
                m += jac_rotate(&self.incs[j].inverse(), &self.omegas[j])
                    * d
                    * jac_exp(&(self.deltas[j] * self.lambda[j]))
                    * self.lambda[j];
            }
            propagate[j] * m
        });
        let (end, start) = self.delta_jacobians();

        let mut out = [Matrix3x4::zeros(); 4];
        for j in 0..4 {
            if j != 0 {
                out[j] += domega_ddelta[j - 1] * end[j - 1];
            }
            if j != 3 {
                out[j] += domega_ddelta[j] * start[j];
            }
        }
        out
    }

    pub fn jac_angvel_knots_tangent(&self) -> [Matrix3<f64>; 4] {
        let raw = self.jac_angvel_knots();
        std::array::from_fn(|j| raw[j] * tangent_lift(&self.knots[j]))
    }
}

pub fn interp_quat(knots: &[UnitQuat; 4], w: &BasisWeights) -> UnitQuat {
    QuatSegment::new(knots, w).orientation()
}

pub fn interp_angvel(knots: &[UnitQuat; 4], w: &BasisWeights) -> Vec3 {
    QuatSegment::new(knots, w).angular_velocity()
}

pub fn jac_quat_knots(knots: &[UnitQuat; 4], w: &BasisWeights) -> [Matrix4<f64>; 4] {
    QuatSegment::new(knots, w).jac_knots()
}

pub fn jac_angvel_knots(knots: &[UnitQuat; 4], w: &BasisWeights) -> [Matrix3x4<f64>; 4] {
    QuatSegment::new(knots, w).jac_angvel_knots()
}

/// Flip `q` onto the hemisphere of `prev` so the knot difference has a
/// principal logarithm.
pub fn canonicalize_sign(prev: &UnitQuat, q: UnitQuat) -> UnitQuat {
    if prev.dot(&q) < 0.0 {
        q.negated()
    } else {
        q
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EuclideanSpline<const N: usize> {
    grid: KnotGrid,
    knots: Vec<SVector<f64, N>>,
}

impl<const N: usize> EuclideanSpline<N> {
    pub fn new(grid: KnotGrid, knots: Vec<SVector<f64, N>>) -> Result<Self> {
        if knots.len() != grid.count {
            return Err(Error::InvalidConfig(format!(
                "{} knots for a grid of {}",
                knots.len(),
                grid.count
            )));
        }
        Ok(Self { grid, knots })
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn knots(&self) -> &[SVector<f64, N>] {
        &self.knots
    }

    pub fn push(&mut self, knot: SVector<f64, N>) {
        self.knots.push(knot);
        self.grid.count += 1;
    }

    pub fn local(&self, w: &BasisWeights) -> [SVector<f64, N>; 4] {
        std::array::from_fn(|j| self.knots[w.first_knot() + j])
    }

    pub fn value(&self, t: f64) -> Result<SVector<f64, N>> {
        let w = self.grid.locate(t)?;
        Ok(interp_vec(&self.local(&w), &w))
    }

    pub fn velocity(&self, t: f64) -> Result<SVector<f64, N>> {
        let w = self.grid.locate(t)?;
        Ok(interp_vel(&self.local(&w), &w))
    }

    pub fn acceleration(&self, t: f64) -> Result<SVector<f64, N>> {
        let w = self.grid.locate(t)?;
        Ok(interp_acc(&self.local(&w), &w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuaternionSpline {
    grid: KnotGrid,
    knots: Vec<UnitQuat>,
}

impl QuaternionSpline {
    /// Knots are sign-canonicalized against their predecessor on insertion.
    pub fn new(grid: KnotGrid, knots: Vec<UnitQuat>) -> Result<Self> {
        if knots.len() != grid.count {
            return Err(Error::InvalidConfig(format!(
                "{} knots for a grid of {}",
                knots.len(),
                grid.count
            )));
        }
        let mut spline = Self {
            grid: KnotGrid { count: 0, ..grid },
            knots: Vec::with_capacity(knots.len()),
        };
        for q in knots {
            spline.push(q);
        }
        Ok(spline)
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn knots(&self) -> &[UnitQuat] {
        &self.knots
    }

    pub fn knots_mut(&mut self) -> &mut [UnitQuat] {
        &mut self.knots
    }

    pub fn push(&mut self, q: UnitQuat) {
        let q = match self.knots.last() {
            Some(prev) => canonicalize_sign(prev, q),
            None => q,
        };
        self.knots.push(q);
        self.grid.count += 1;
    }

    pub fn local(&self, w: &BasisWeights) -> [UnitQuat; 4] {
        std::array::from_fn(|j| self.knots[w.first_knot() + j])
    }

    pub fn segment(&self, t: f64) -> Result<QuatSegment> {
        let w = self.grid.locate(t)?;
        Ok(QuatSegment::new(&self.local(&w), &w))
    }

    pub fn orientation(&self, t: f64) -> Result<UnitQuat> {
        Ok(self.segment(t)?.orientation())
    }

    pub fn angular_velocity(&self, t: f64) -> Result<Vec3> {
        Ok(self.segment(t)?.angular_velocity())
    }
}

pub type PositionSpline = EuclideanSpline<3>;
