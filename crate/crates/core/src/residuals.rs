//! Measurement models for UWB ranging and inertial data, their Jacobians
//! with respect to local knot blocks and calibration parameters, and
//! noise whitening.
//!
//! Quaternion-valued parameters are differentiated in their local tangent
//! space (`q ⊗ Exp(φ)`), the gravity direction in a 2-D tangent basis of S².

use std::collections::BTreeMap;

use nalgebra::{
    DMatrix, DMatrixView, DVector, Dim, Matrix, Matrix3, Matrix3x2, Matrix6, RawStorage, RowVector3, SMatrix, Vector2,
};
use serde::{Deserialize, Serialize};

use crate::bspline::{interp_acc, interp_vec, jac_acc_knots, jac_vec_knots, BasisWeights};
use crate::error::{Error, Result};
use crate::quat::{conjugation_matrix, jac_rotate, tangent_lift, UnitQuat, Vec3};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq)]
pub struct ImuMeasurement {
    pub t: f64,
    /// Specific force, m/s².
    pub accel: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UwbToaMeasurement {
    pub t: f64,
    pub anchor: String,
    pub range: f64,
}

/// Range difference `‖tag - a_i‖ - ‖tag - a_j‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct UwbTdoaMeasurement {
    pub t: f64,
    pub anchor_i: String,
    pub anchor_j: String,
    pub ddist: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Measurement {
    Imu(ImuMeasurement),
    Toa(UwbToaMeasurement),
    Tdoa(UwbTdoaMeasurement),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Imu,
    Uwb,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Imu => "imu",
            Stream::Uwb => "uwb",
        }
    }
}

impl Measurement {
    pub fn t(&self) -> f64 {
        match self {
            Measurement::Imu(m) => m.t,
            Measurement::Toa(m) => m.t,
            Measurement::Tdoa(m) => m.t,
        }
    }

    pub fn stream(&self) -> Stream {
        match self {
            Measurement::Imu(_) => Stream::Imu,
            _ => Stream::Uwb,
        }
    }
}

/// World-to-UWB extrinsic, gravity and tag lever arm.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// Rotation of `T_W^U`: `x_U = R(q_wu) x_W + t_wu`.
    pub q_wu: UnitQuat,
    pub t_wu: Vec3,
    /// Unit direction of the gravity term added to the kinematic acceleration.
    pub g_dir: Vec3,
    pub g_mag: f64,
    /// Tag position in the body frame.
    pub tag_offset: Vec3,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            q_wu: UnitQuat::identity(),
            t_wu: Vec3::zeros(),
            g_dir: Vec3::z(),
            g_mag: 9.81,
            tag_offset: Vec3::zeros(),
        }
    }
}

impl Calibration {
    pub fn gravity(&self) -> Vec3 {
        self.g_dir * self.g_mag
    }

    pub fn world_to_uwb(&self, p_w: &Vec3) -> Vec3 {
        self.q_wu.rotate(p_w) + self.t_wu
    }

    /// Moves the gravity direction by `delta` in its tangent plane.
    pub fn retract_gravity(&mut self, delta: &Vector2<f64>) {
        let basis = gravity_tangent_basis(&self.g_dir);
        self.g_dir = (self.g_dir + basis * delta).normalize();
    }
}

/// Orthonormal pair spanning the plane perpendicular to `g`.
pub fn gravity_tangent_basis(g: &Vec3) -> Matrix3x2<f64> {
    let g = g.normalize();
    let helper = if g.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let b1 = g.cross(&helper).normalize();
    let b2 = g.cross(&b1);
    Matrix3x2::from_columns(&[b1, b2])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorMap(pub BTreeMap<String, [f64; 3]>);

impl AnchorMap {
    pub fn insert(&mut self, id: impl Into<String>, pos: Vec3) {
        self.0.insert(id.into(), [pos.x, pos.y, pos.z]);
    }

    pub fn get(&self, id: &str) -> Result<Vec3> {
        self.0
            .get(id)
            .map(|p| Vec3::new(p[0], p[1], p[2]))
            .ok_or_else(|| Error::UnknownAnchor(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    Uwb,
    Accel,
    Gyro,
    Bias,
}

/// Measurement covariances and per-sensor weights of the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub cov_uwb: f64,
    pub cov_accel: Matrix3<f64>,
    pub cov_gyro: Matrix3<f64>,
    /// Covariance of the bias increment between consecutive IMU samples.
    pub cov_bias: Matrix6<f64>,
    pub weight_uwb: f64,
    pub weight_imu: f64,
}

impl NoiseModel {
    pub fn isotropic(
        uwb_sigma: f64,
        accel_sigma: f64,
        gyro_sigma: f64,
        bias_accel_sigma: f64,
        bias_gyro_sigma: f64,
    ) -> Self {
        let mut bias = Matrix6::identity() * bias_accel_sigma.powi(2);
        for i in 3..6 {
            bias[(i, i)] = bias_gyro_sigma.powi(2);
        }
        Self {
            cov_uwb: uwb_sigma.powi(2),
            cov_accel: Matrix3::identity() * accel_sigma.powi(2),
            cov_gyro: Matrix3::identity() * gyro_sigma.powi(2),
            cov_bias: bias,
            weight_uwb: 1.0,
            weight_imu: 1.0,
        }
    }

    /// Square-root information matrices `√𝓋 · L⁻¹` with `C = L Lᵀ`.
    pub fn whitening(&self) -> Result<Whitening> {
        fn sqrt_info<const N: usize>(
            cov: &SMatrix<f64, N, N>,
            weight: f64,
            name: &'static str,
        ) -> Result<SMatrix<f64, N, N>> {
            if !(weight > 0.0) || (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
                return Err(Error::NonSpdCovariance(name));
            }
            let chol = cov.cholesky().ok_or(Error::NonSpdCovariance(name))?;
            let linv = chol.l().try_inverse().ok_or(Error::NonSpdCovariance(name))?;
            Ok(linv * weight.sqrt())
        }
        if !(self.cov_uwb > 0.0) || !(self.weight_uwb > 0.0) {
            return Err(Error::NonSpdCovariance("uwb"));
        }
        Ok(Whitening {
            uwb: (self.weight_uwb / self.cov_uwb).sqrt(),
            accel: sqrt_info(&self.cov_accel, self.weight_imu, "accelerometer")?,
            gyro: sqrt_info(&self.cov_gyro, self.weight_imu, "gyroscope")?,
            bias: sqrt_info(&self.cov_bias, self.weight_imu, "bias")?,
        })
    }
}

/// Precomputed square-root information per residual kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitening {
    pub uwb: f64,
    pub accel: Matrix3<f64>,
    pub gyro: Matrix3<f64>,
    pub bias: Matrix6<f64>,
}

impl Whitening {
    pub fn apply(&self, lin: &mut Linearization, kind: ResidualKind) {
        match kind {
            ResidualKind::Uwb => lin.scale(self.uwb),
            ResidualKind::Accel => lin.premultiply(&self.accel),
            ResidualKind::Gyro => lin.premultiply(&self.gyro),
            ResidualKind::Bias => lin.premultiply(&self.bias),
        }
    }
}

pub fn whiten(mut lin: Linearization, noise: &NoiseModel, kind: ResidualKind) -> Result<Linearization> {
    noise.whitening()?.apply(&mut lin, kind);
    Ok(lin)
}

/// Accept iff `|predicted - measured| <= threshold`.
pub fn gate_outlier(predicted: f64, measured: f64, threshold: f64) -> bool {
    (predicted - measured).abs() <= threshold
}

/// A parameter block a residual may depend on. Knot blocks carry the global
/// knot index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamBlock {
    Rot(usize),
    Pos(usize),
    /// Both bias channels, `[acc, gyro]`.
    Bias(usize),
    BiasAcc(usize),
    BiasGyro(usize),
    CalibRot,
    CalibTrans,
    Gravity,
}

impl ParamBlock {
    pub fn dim(self) -> usize {
        match self {
            ParamBlock::Bias(_) => 6,
            ParamBlock::Gravity => 2,
            _ => 3,
        }
    }

    pub fn knot(self) -> Option<usize> {
        match self {
            ParamBlock::Rot(k)
            | ParamBlock::Pos(k)
            | ParamBlock::Bias(k)
            | ParamBlock::BiasAcc(k)
            | ParamBlock::BiasGyro(k) => Some(k),
            _ => None,
        }
    }
}

/// Residual value with a dense Jacobian split into parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    pub residual: DVector<f64>,
    /// Column-major, `residual.len()` rows.
    jac: Vec<f64>,
    blocks: Vec<(ParamBlock, usize)>,
}

impl Linearization {
    pub fn new(residual: DVector<f64>) -> Self {
        Self {
            jac: Vec::with_capacity(residual.len() * 48),
            blocks: Vec::with_capacity(16),
            residual,
        }
    }

    pub fn dim(&self) -> usize {
        self.residual.len()
    }

    pub fn ncols(&self) -> usize {
        self.jac.len() / self.dim()
    }

    /// Adds `jac` into the columns of `block`, creating them on first use.
    pub fn add<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(&mut self, block: ParamBlock, jac: &Matrix<f64, R, C, S>) {
        let m = self.dim();
        debug_assert_eq!(jac.nrows(), m);
        debug_assert_eq!(jac.ncols(), block.dim());
        let offset = match self.blocks.iter().find(|(b, _)| *b == block) {
            Some(&(_, off)) => off,
            None => {
                let off = self.ncols();
                self.blocks.push((block, off));
                self.jac.resize(self.jac.len() + m * block.dim(), 0.0);
                off
            }
        };
        for c in 0..block.dim() {
            for r in 0..m {
                self.jac[(offset + c) * m + r] += jac[(r, c)];
            }
        }
    }

    pub fn blocks(&self) -> &[(ParamBlock, usize)] {
        &self.blocks
    }

    /// Column-major Jacobian storage, `dim()` rows.
    pub fn jacobian_slice(&self) -> &[f64] {
        &self.jac
    }

    pub fn jacobian(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.jac, self.dim(), self.ncols())
    }

    pub fn block(&self, block: ParamBlock) -> Option<DMatrix<f64>> {
        let &(_, off) = self.blocks.iter().find(|(b, _)| *b == block)?;
        Some(self.jacobian().columns(off, block.dim()).into_owned())
    }

    /// Multiplies residual and Jacobian by `s`.
    pub fn scale(&mut self, s: f64) {
        self.residual *= s;
        self.jac.iter_mut().for_each(|x| *x *= s);
    }

    fn premultiply<const N: usize>(&mut self, s: &SMatrix<f64, N, N>) {
        debug_assert_eq!(self.dim(), N);
        self.residual = DVector::from_column_slice(
            (s * SMatrix::<f64, N, 1>::from_column_slice(self.residual.as_slice())).as_slice(),
        );
        for col in self.jac.chunks_exact_mut(N) {
            let v = s * SMatrix::<f64, N, 1>::from_column_slice(col);
            col.copy_from_slice(v.as_slice());
        }
    }
}

fn locate(traj: &Trajectory, t: f64) -> Result<BasisWeights> {
    traj.locate(t).map_err(|_| Error::OutOfWindow(t))
}

/// Tag position in the world frame with its knot derivatives.
struct TagKinematics {
    w: BasisWeights,
    tag_w: Vec3,
    /// ∂tag/∂φ_k, absent when the lever arm is zero.
    d_rot: Option<[Matrix3<f64>; 4]>,
    pos_coeffs: [f64; 4],
}

fn tag_kinematics(traj: &Trajectory, t: f64, calib: &Calibration) -> Result<TagKinematics> {
    let w = locate(traj, t)?;
    let pos = interp_vec(&traj.local_positions(&w), &w);
    let pos_coeffs = jac_vec_knots(&w);
    if calib.tag_offset == Vec3::zeros() {
        return Ok(TagKinematics {
            w,
            tag_w: pos,
            d_rot: None,
            pos_coeffs,
        });
    }
    let seg = traj.quat_segment(&w);
    let r = seg.orientation();
    let jr = jac_rotate(&r, &calib.tag_offset);
    let jq = seg.jac_knots_tangent();
    Ok(TagKinematics {
        w,
        tag_w: r.rotate(&calib.tag_offset) + pos,
        d_rot: Some(std::array::from_fn(|k| jr * jq[k])),
        pos_coeffs,
    })
}

/// Chains `∂e/∂p_U` through the extrinsic and the tag kinematics.
fn add_range_blocks(lin: &mut Linearization, de_dpu: &RowVector3<f64>, kin: &TagKinematics, calib: &Calibration) {
    let de_dtag = de_dpu * calib.q_wu.to_rotation_matrix();
    let first = kin.w.first_knot();
    for k in 0..4 {
        if let Some(d_rot) = &kin.d_rot {
            lin.add(ParamBlock::Rot(first + k), &(de_dtag * d_rot[k]));
        }
        lin.add(ParamBlock::Pos(first + k), &(de_dtag * kin.pos_coeffs[k]));
    }
    lin.add(
        ParamBlock::CalibRot,
        &(de_dpu * jac_rotate(&calib.q_wu, &kin.tag_w) * tangent_lift(&calib.q_wu)),
    );
    lin.add(ParamBlock::CalibTrans, de_dpu);
}

fn unit_towards(p_u: &Vec3, anchor: &Vec3, id: &str) -> Result<(f64, RowVector3<f64>)> {
    let diff = p_u - anchor;
    let dist = diff.norm();
    if dist < 1e-9 {
        return Err(Error::DegenerateGeometry(id.to_string()));
    }
    Ok((dist, (diff / dist).transpose()))
}

/// `‖T_W^U · s_ta^W − a‖ − ẑ` for a time-of-arrival range.
pub fn toa_residual(
    traj: &Trajectory,
    meas: &UwbToaMeasurement,
    calib: &Calibration,
    anchors: &AnchorMap,
) -> Result<Linearization> {
    let anchor = anchors.get(&meas.anchor)?;
    let kin = tag_kinematics(traj, meas.t, calib)?;
    let p_u = calib.world_to_uwb(&kin.tag_w);
    let (dist, u) = unit_towards(&p_u, &anchor, &meas.anchor)?;
    let mut lin = Linearization::new(DVector::from_element(1, dist - meas.range));
    add_range_blocks(&mut lin, &u, &kin, calib);
    Ok(lin)
}

/// `‖p_U − a_i‖ − ‖p_U − a_j‖ − ẑ` for a time-difference-of-arrival measurement.
pub fn tdoa_residual(
    traj: &Trajectory,
    meas: &UwbTdoaMeasurement,
    calib: &Calibration,
    anchors: &AnchorMap,
) -> Result<Linearization> {
    let a_i = anchors.get(&meas.anchor_i)?;
    let a_j = anchors.get(&meas.anchor_j)?;
    let kin = tag_kinematics(traj, meas.t, calib)?;
    let p_u = calib.world_to_uwb(&kin.tag_w);
    let (d_i, u_i) = unit_towards(&p_u, &a_i, &meas.anchor_i)?;
    let (d_j, u_j) = unit_towards(&p_u, &a_j, &meas.anchor_j)?;
    let mut lin = Linearization::new(DVector::from_element(1, d_i - d_j - meas.ddist));
    add_range_blocks(&mut lin, &(u_i - u_j), &kin, calib);
    Ok(lin)
}

/// Model-predicted minus measured UWB value, without Jacobians.
pub fn uwb_innovation(traj: &Trajectory, meas: &Measurement, calib: &Calibration, anchors: &AnchorMap) -> Result<f64> {
    let tag = |t: f64| -> Result<Vec3> {
        let w = locate(traj, t)?;
        let mut p = interp_vec(&traj.local_positions(&w), &w);
        if calib.tag_offset != Vec3::zeros() {
            p += traj.quat_segment(&w).orientation().rotate(&calib.tag_offset);
        }
        Ok(calib.world_to_uwb(&p))
    };
    match meas {
        Measurement::Toa(m) => Ok((tag(m.t)? - anchors.get(&m.anchor)?).norm() - m.range),
        Measurement::Tdoa(m) => {
            let p = tag(m.t)?;
            Ok((p - anchors.get(&m.anchor_i)?).norm() - (p - anchors.get(&m.anchor_j)?).norm() - m.ddist)
        }
        Measurement::Imu(m) => Err(Error::InvalidConfig(format!(
            "IMU sample at t = {} has no UWB innovation",
            m.t
        ))),
    }
}

/// `R(r)⁻¹ (s̈ + g) + b_acc − â`.
pub fn accel_residual(traj: &Trajectory, meas: &ImuMeasurement, calib: &Calibration) -> Result<Linearization> {
    let w = locate(traj, meas.t)?;
    let seg = traj.quat_segment(&w);
    let r_inv = seg.orientation().inverse();
    let y = interp_acc(&traj.local_positions(&w), &w) + calib.gravity();
    let bias = interp_vec(&traj.local_biases(&w), &w);
    let e = r_inv.rotate(&y) + bias.fixed_rows::<3>(0) - meas.accel;

    let mut lin = Linearization::new(DVector::from_column_slice(e.as_slice()));
    let rt = r_inv.to_rotation_matrix();
    let d_rot = jac_rotate(&r_inv, &y) * conjugation_matrix();
    let jq = seg.jac_knots_tangent();
    let acc_c = jac_acc_knots(&w);
    let vec_c = jac_vec_knots(&w);
    let first = w.first_knot();
    for k in 0..4 {
        lin.add(ParamBlock::Rot(first + k), &(d_rot * jq[k]));
        lin.add(ParamBlock::Pos(first + k), &(rt * acc_c[k]));
        lin.add(ParamBlock::BiasAcc(first + k), &(Matrix3::identity() * vec_c[k]));
    }
    lin.add(
        ParamBlock::Gravity,
        &(rt * gravity_tangent_basis(&calib.g_dir) * calib.g_mag),
    );
    Ok(lin)
}

/// `ω(t) + b_gyro − ω̂`.
pub fn gyro_residual(traj: &Trajectory, meas: &ImuMeasurement) -> Result<Linearization> {
    let w = locate(traj, meas.t)?;
    let seg = traj.quat_segment(&w);
    let bias = interp_vec(&traj.local_biases(&w), &w);
    let e = seg.angular_velocity() + bias.fixed_rows::<3>(3) - meas.gyro;

    let mut lin = Linearization::new(DVector::from_column_slice(e.as_slice()));
    let jw = seg.jac_angvel_knots_tangent();
    let vec_c = jac_vec_knots(&w);
    let first = w.first_knot();
    for k in 0..4 {
        lin.add(ParamBlock::Rot(first + k), &jw[k]);
        lin.add(ParamBlock::BiasGyro(first + k), &(Matrix3::identity() * vec_c[k]));
    }
    Ok(lin)
}

/// `b(t_k1) − b(t_k)`; touches up to five knots when the two times straddle
/// a segment boundary.
pub fn bias_residual(traj: &Trajectory, t_k: f64, t_k1: f64) -> Result<Linearization> {
    let w0 = locate(traj, t_k)?;
    let w1 = locate(traj, t_k1)?;
    let b0 = interp_vec(&traj.local_biases(&w0), &w0);
    let b1 = interp_vec(&traj.local_biases(&w1), &w1);
    let mut lin = Linearization::new(DVector::from_column_slice((b1 - b0).as_slice()));
    let c0 = jac_vec_knots(&w0);
    let c1 = jac_vec_knots(&w1);
    for k in 0..4 {
        lin.add(ParamBlock::Bias(w0.first_knot() + k), &(Matrix6::identity() * -c0[k]));
        lin.add(ParamBlock::Bias(w1.first_knot() + k), &(Matrix6::identity() * c1[k]));
    }
    Ok(lin)
}

/// Applies a tangent-space increment to one parameter block in place.
pub fn retract_block(traj: &mut Trajectory, calib: &mut Calibration, block: ParamBlock, delta: &[f64]) {
    debug_assert_eq!(delta.len(), block.dim());
    let v3 = || Vec3::from_column_slice(&delta[..3]);
    match block {
        ParamBlock::Rot(k) => {
            let knot = &mut traj.knots_mut()[k];
            knot.q = knot.q.boxplus(&v3());
        }
        ParamBlock::Pos(k) => traj.knots_mut()[k].p += v3(),
        ParamBlock::Bias(k) => {
            for (b, d) in traj.knots_mut()[k].b.iter_mut().zip(delta) {
                *b += d;
            }
        }
        ParamBlock::BiasAcc(k) => {
            let mut b = traj.knots_mut()[k].b.fixed_rows_mut::<3>(0).into_owned();
            b += v3();
            traj.knots_mut()[k].b.fixed_rows_mut::<3>(0).copy_from(&b);
        }
        ParamBlock::BiasGyro(k) => {
            let mut b = traj.knots_mut()[k].b.fixed_rows_mut::<3>(3).into_owned();
            b += v3();
            traj.knots_mut()[k].b.fixed_rows_mut::<3>(3).copy_from(&b);
        }
        ParamBlock::CalibRot => calib.q_wu = calib.q_wu.boxplus(&v3()),
        ParamBlock::CalibTrans => calib.t_wu += v3(),
        ParamBlock::Gravity => calib.retract_gravity(&Vector2::new(delta[0], delta[1])),
    }
}
