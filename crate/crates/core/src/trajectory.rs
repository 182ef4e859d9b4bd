//! Knot storage for the full 6-DoF + bias state and continuous-time queries.

use nalgebra::SVector;

use crate::bspline::{canonicalize_sign, interp_acc, interp_vec, interp_vel, BasisWeights, KnotGrid, QuatSegment};
use crate::error::Result;
use crate::quat::{UnitQuat, Vec3};

pub type Vec6 = SVector<f64, 6>;

/// One control point: orientation, position and the stacked
/// `[accelerometer, gyroscope]` bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnotState {
    pub q: UnitQuat,
    pub p: Vec3,
    pub b: Vec6,
}

impl Default for KnotState {
    fn default() -> Self {
        Self {
            q: UnitQuat::identity(),
            p: Vec3::zeros(),
            b: Vec6::zeros(),
        }
    }
}

impl KnotState {
    pub fn bias_acc(&self) -> Vec3 {
        self.b.fixed_rows::<3>(0).into_owned()
    }

    pub fn bias_gyro(&self) -> Vec3 {
        self.b.fixed_rows::<3>(3).into_owned()
    }
}

/// Interpolated state at one timestamp; every field comes from the same
/// spline evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateSample {
    pub t: f64,
    pub q: UnitQuat,
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    pub omega_body: Vec3,
    pub bias: Vec6,
}

/// Uniform-grid spline over [`KnotState`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    grid: KnotGrid,
    knots: Vec<KnotState>,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, knots: Vec<KnotState>) -> Result<Self> {
        let grid = KnotGrid::new(t0, dt, knots.len())?;
        let mut traj = Self {
            grid,
            knots: Vec::with_capacity(knots.len()),
        };
        traj.grid.count = 0;
        for k in knots {
            traj.push(k);
        }
        Ok(traj)
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn knots(&self) -> &[KnotState] {
        &self.knots
    }

    pub fn knots_mut(&mut self) -> &mut [KnotState] {
        &mut self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Appends a knot, flipping its quaternion onto the predecessor's hemisphere.
    pub fn push(&mut self, mut knot: KnotState) {
        if let Some(prev) = self.knots.last() {
            knot.q = canonicalize_sign(&prev.q, knot.q);
        }
        self.knots.push(knot);
        self.grid.count += 1;
    }

    pub fn locate(&self, t: f64) -> Result<BasisWeights> {
        self.grid.locate(t)
    }

    pub fn local_quats(&self, w: &BasisWeights) -> [UnitQuat; 4] {
        std::array::from_fn(|j| self.knots[w.first_knot() + j].q)
    }

    pub fn local_positions(&self, w: &BasisWeights) -> [Vec3; 4] {
        std::array::from_fn(|j| self.knots[w.first_knot() + j].p)
    }

    pub fn local_biases(&self, w: &BasisWeights) -> [Vec6; 4] {
        std::array::from_fn(|j| self.knots[w.first_knot() + j].b)
    }

    pub fn quat_segment(&self, w: &BasisWeights) -> QuatSegment {
        QuatSegment::new(&self.local_quats(w), w)
    }

    pub fn position(&self, t: f64) -> Result<Vec3> {
        let w = self.locate(t)?;
        Ok(interp_vec(&self.local_positions(&w), &w))
    }

    pub fn orientation(&self, t: f64) -> Result<UnitQuat> {
        let w = self.locate(t)?;
        Ok(self.quat_segment(&w).orientation())
    }

    pub fn bias(&self, t: f64) -> Result<Vec6> {
        let w = self.locate(t)?;
        Ok(interp_vec(&self.local_biases(&w), &w))
    }

    pub fn sample(&self, t: f64) -> Result<StateSample> {
        let w = self.locate(t)?;
        let pos = self.local_positions(&w);
        let seg = self.quat_segment(&w);
        Ok(StateSample {
            t,
            q: seg.orientation(),
            p: interp_vec(&pos, &w),
            v: interp_vel(&pos, &w),
            a: interp_acc(&pos, &w),
            omega_body: seg.angular_velocity(),
            bias: interp_vec(&self.local_biases(&w), &w),
        })
    }
}
