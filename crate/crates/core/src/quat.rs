//! Unit quaternions on S³, the exponential and logarithm maps at identity, and
//! their closed-form Jacobians.
//!
//! Layout is scalar first, `[w, x, y, z]`, and `⊗` is the Hamilton product.
//! Tangent vectors use the half-angle scale: `exp_map(v)` rotates by `2‖v‖`
//! about `v / ‖v‖`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector3, Vector4};
use std::ops::Mul;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Half-angle tangent vector at identity, the codomain of [`log_map`].
pub type RotationVector = Vector3<f64>;

const SMALL_ANGLE: f64 = 1e-4;
const ANTIPODAL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuat {
    coords: Vector4<f64>,
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuat {
    pub fn identity() -> Self {
        Self {
            coords: Vector4::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    /// Builds a quaternion from `[w, x, y, z]`, normalizing it.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::from_coords(Vector4::new(w, x, y, z))
    }

    pub fn from_coords(coords: Vector4<f64>) -> Self {
        Self {
            coords: coords / coords.norm(),
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        exp_map(&(axis.normalize() * (0.5 * angle)))
    }

    #[inline]
    pub fn coords(&self) -> &Vector4<f64> {
        &self.coords
    }

    #[inline]
    pub fn w(&self) -> f64 {
        self.coords[0]
    }

    #[inline]
    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.coords[1], self.coords[2], self.coords[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.coords[0], self.coords[1], self.coords[2], self.coords[3]]
    }

    pub fn dot(&self, other: &UnitQuat) -> f64 {
        self.coords.dot(&other.coords)
    }

    /// The same rotation with opposite sign.
    pub fn negated(&self) -> Self {
        Self { coords: -self.coords }
    }

    pub fn hamilton(&self, rhs: &UnitQuat) -> UnitQuat {
        UnitQuat::from_coords(hamilton_raw(&self.coords, &rhs.coords))
    }

    pub fn inverse(&self) -> UnitQuat {
        Self {
            coords: Vector4::new(self.coords[0], -self.coords[1], -self.coords[2], -self.coords[3]),
        }
    }

    /// Matrix `L(a)` with `L(a)·b = a ⊗ b`.
    pub fn left_matrix(&self) -> Matrix4<f64> {
        left_matrix_raw(&self.coords)
    }

    /// Matrix `R(b)` with `R(b)·a = a ⊗ b`.
    pub fn right_matrix(&self) -> Matrix4<f64> {
        right_matrix_raw(&self.coords)
    }

    pub fn rotate(&self, x: &Vec3) -> Vec3 {
        let w = self.w();
        let v = self.vec();
        let t = 2.0 * v.cross(x);
        x + w * t + v.cross(&t)
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = 1.0;
            m.set_column(i, &self.rotate(&e));
        }
        m
    }

    /// Principal logarithm that never fails; the antipode maps to `[π, 0, 0]`.
    pub fn log(&self) -> RotationVector {
        log_map(self).unwrap_or_else(|_| Vec3::new(std::f64::consts::PI, 0.0, 0.0))
    }

    /// `self ⊗ Exp(phi)`, the right retraction used by the optimizer.
    pub fn boxplus(&self, phi: &Vec3) -> UnitQuat {
        self.hamilton(&exp_map(phi))
    }

    /// `Log(self⁻¹ ⊗ other)`.
    pub fn boxminus(&self, other: &UnitQuat) -> Vec3 {
        self.inverse().hamilton(other).log()
    }

    /// Geodesic rotation angle in radians between two orientations, sign-invariant.
    pub fn angle_to(&self, other: &UnitQuat) -> f64 {
        let d = self.inverse().hamilton(other);
        let d = if d.w() < 0.0 { d.negated() } else { d };
        2.0 * d.log().norm()
    }
}

impl Mul for UnitQuat {
    type Output = UnitQuat;

    fn mul(self, rhs: UnitQuat) -> UnitQuat {
        self.hamilton(&rhs)
    }
}

impl Mul<&UnitQuat> for &UnitQuat {
    type Output = UnitQuat;

    fn mul(self, rhs: &UnitQuat) -> UnitQuat {
        self.hamilton(rhs)
    }
}

pub fn hamilton(a: &UnitQuat, b: &UnitQuat) -> UnitQuat {
    a.hamilton(b)
}

pub fn inverse(q: &UnitQuat) -> UnitQuat {
    q.inverse()
}

pub fn rotate(q: &UnitQuat, x: &Vec3) -> Vec3 {
    q.rotate(x)
}

/// Hamilton product on raw 4-vectors (no normalization).
pub fn hamilton_raw(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

pub fn left_matrix_raw(q: &Vector4<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

pub fn right_matrix_raw(q: &Vector4<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// `diag(1, -1, -1, -1)`: maps a quaternion to its conjugate.
pub fn conjugation_matrix() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, -1.0))
}

/// `d(q ⊗ Exp(φ))/dφ` at `φ = 0`.
pub fn tangent_lift(q: &UnitQuat) -> Matrix4x3<f64> {
    q.left_matrix().fixed_columns::<3>(1).into_owned()
}

/// sin(x)/x and (cos x − sin x / x)/x², with series below the small-angle threshold.
fn sinc_terms(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, -1.0 / 3.0 + t2 / 30.0)
    } else {
        let s = theta.sin() / theta;
        (s, (theta.cos() - s) / (theta * theta))
    }
}

pub fn exp_map(v: &RotationVector) -> UnitQuat {
    let theta = v.norm();
    let (sinc, _) = sinc_terms(theta);
    UnitQuat::from_coords(Vector4::new(theta.cos(), v[0] * sinc, v[1] * sinc, v[2] * sinc))
}

/// atan2(‖v‖, w)/‖v‖ and the coefficient of `v vᵀ` in the log Jacobian.
fn atan_terms(w: f64, n: f64) -> (f64, f64) {
    if n < SMALL_ANGLE && w > 0.0 {
        let r2 = (n / w) * (n / w);
        let a = (1.0 - r2 / 3.0 + r2 * r2 / 5.0) / w;
        let w3 = w * w * w;
        let b = -1.0 / w + 1.0 / (3.0 * w3) - n * n / (5.0 * w3 * w * w);
        (a, b)
    } else {
        let a = n.atan2(w) / n;
        (a, (w - a) / (n * n))
    }
}

fn check_antipodal(q: &UnitQuat) -> Result<()> {
    if q.w() <= -1.0 + ANTIPODAL_TOL && q.vec().norm() < ANTIPODAL_TOL {
        Err(Error::AntipodalInput)
    } else {
        Ok(())
    }
}

/// Principal logarithm using the two-argument arctangent, so `w < 0` maps
/// continuously onto `‖v‖ ∈ (π/2, π)`.
pub fn log_map(q: &UnitQuat) -> Result<RotationVector> {
    check_antipodal(q)?;
    let rv = q.vec();
    let (a, _) = atan_terms(q.w(), rv.norm());
    Ok(rv * a)
}

/// `dExp(v)/dv` as a 4×3 matrix.
pub fn jac_exp(v: &RotationVector) -> Matrix4x3<f64> {
    let theta = v.norm();
    let (sinc, k) = sinc_terms(theta);
    let mut j = Matrix4x3::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&(-v.transpose() * sinc));
    j.fixed_view_mut::<3, 3>(1, 0)
        .copy_from(&(v * v.transpose() * k + Matrix3::identity() * sinc));
    j
}

/// `dLog(q)/dq` as a 3×4 matrix, valid for perturbations tangent to S³.
pub fn jac_log(q: &UnitQuat) -> Result<Matrix3x4<f64>> {
    check_antipodal(q)?;
    Ok(jac_log_unchecked(q))
}

pub(crate) fn jac_log_unchecked(q: &UnitQuat) -> Matrix3x4<f64> {
    let rv = q.vec();
    let (a, b) = atan_terms(q.w(), rv.norm());
    let mut j = Matrix3x4::zeros();
    j.fixed_view_mut::<3, 1>(0, 0).copy_from(&(-rv));
    j.fixed_view_mut::<3, 3>(0, 1)
        .copy_from(&(Matrix3::identity() * a + rv * rv.transpose() * b));
    j
}

/// Derivative of `q ⊗ [0, x] ⊗ q*` with respect to the four coordinates of `q`.
pub fn jac_rotate(q: &UnitQuat, x: &Vec3) -> Matrix3x4<f64> {
    jac_rotate_raw(q.coords(), x)
}

pub(crate) fn jac_rotate_raw(q: &Vector4<f64>, x: &Vec3) -> Matrix3x4<f64> {
    let w = q[0];
    let v = Vec3::new(q[1], q[2], q[3]);
    let mut j = Matrix3x4::zeros();
    j.fixed_view_mut::<3, 1>(0, 0).copy_from(&(2.0 * (w * x + v.cross(x))));
    let block = Matrix3::identity() * (2.0 * v.dot(x)) + 2.0 * v * x.transpose()
        - 2.0 * x * v.transpose()
        - 2.0 * w * x.cross_matrix();
    j.fixed_view_mut::<3, 3>(0, 1).copy_from(&block);
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * scale
    }

    fn random_quat(rng: &mut ChaCha8Rng) -> UnitQuat {
        UnitQuat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    #[test]
    fn hamilton_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_quat(&mut rng);
        assert_eq!(UnitQuat::identity() * q, q);
        let e = q * q.inverse();
        assert!((e.coords() - UnitQuat::identity().coords()).norm() < 1e-15);
        let i = UnitQuat::new(0.0, 1.0, 0.0, 0.0);
        let j = UnitQuat::new(0.0, 0.0, 1.0, 0.0);
        assert_eq!((i * j).to_array(), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn inverse_is_conjugate() {
        assert_eq!(UnitQuat::identity().inverse(), UnitQuat::identity());
        let i = UnitQuat::new(0.0, 1.0, 0.0, 0.0);
        assert_eq!(i.inverse().to_array(), [0.0, -1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_quat(&mut rng);
        assert_eq!(q.inverse().inverse(), q);
    }

    #[test]
    fn product_matrices_agree_with_hamilton() {
        assert_eq!(UnitQuat::identity().left_matrix(), Matrix4::identity());
        assert_eq!(UnitQuat::identity().right_matrix(), Matrix4::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_quat(&mut rng);
            let b = random_quat(&mut rng);
            let ab = hamilton_raw(a.coords(), b.coords());
            assert!((a.left_matrix() * b.coords() - ab).amax() < 1e-12);
            assert!((b.right_matrix() * a.coords() - ab).amax() < 1e-12);
        }
    }

    #[test]
    fn rotate_examples() {
        let x = Vec3::new(0.3, -1.0, 2.0);
        assert_eq!(UnitQuat::identity().rotate(&x), x);
        let z180 = UnitQuat::new(0.0, 0.0, 0.0, 1.0);
        let r = z180.rotate(&Vec3::x());
        assert!((r - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let x = random_vec(&mut rng, 5.0);
            assert!(close(q.rotate(&x).norm(), x.norm(), 1e-12));
            // matches the sandwich product
            let xq = Vector4::new(0.0, x[0], x[1], x[2]);
            let s = hamilton_raw(&hamilton_raw(q.coords(), &xq), q.inverse().coords());
            assert!((q.rotate(&x) - Vec3::new(s[1], s[2], s[3])).norm() < 1e-12);
        }
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_map(&Vec3::zeros()), UnitQuat::identity());
        let q = exp_map(&Vec3::new(FRAC_PI_4, 0.0, 0.0));
        let h = 0.5f64.sqrt();
        assert!((q.coords() - Vector4::new(h, h, 0.0, 0.0)).norm() < 1e-15);
        let q = exp_map(&Vec3::new(FRAC_PI_2, 0.0, 0.0));
        assert!((q.coords() - Vector4::new(0.0, 1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn log_examples() {
        assert_eq!(log_map(&UnitQuat::identity()).unwrap(), Vec3::zeros());
        let v = log_map(&UnitQuat::new(0.0, 1.0, 0.0, 0.0)).unwrap();
        assert!((v - Vec3::new(FRAC_PI_2, 0.0, 0.0)).norm() < 1e-15);
        assert!(matches!(
            log_map(&UnitQuat::new(-1.0, 0.0, 0.0, 0.0)),
            Err(Error::AntipodalInput)
        ));
        // w < 0 stays on the continuous branch
        let v = Vec3::new(0.0, 2.5, 0.0);
        assert!((log_map(&exp_map(&v)).unwrap() - v).norm() < 1e-12);
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let dir = random_vec(&mut rng, 1.0).normalize();
            let v = dir * rng.random_range(0.0..PI - 0.1);
            let back = log_map(&exp_map(&v)).unwrap();
            max_err = max_err.max((back - v).amax());
        }
        assert!(max_err < 1e-10, "max err {max_err}");
        // small-angle branch
        let v = Vec3::new(3e-5, -2e-5, 1e-6);
        assert!((log_map(&exp_map(&v)).unwrap() - v).amax() < 1e-18);
    }

    #[test]
    fn jac_exp_limits_and_finite_differences() {
        let j0 = jac_exp(&Vec3::zeros());
        assert_eq!(j0.row(0).amax(), 0.0);
        assert_eq!(j0.fixed_view::<3, 3>(1, 0).into_owned(), Matrix3::identity());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-6;
        for _ in 0..100 {
            let v = random_vec(&mut rng, 1.0).normalize();
            let j = jac_exp(&v);
            for c in 0..3 {
                let mut dv = Vec3::zeros();
                dv[c] = h;
                let fd = (exp_map(&(v + dv)).coords() - exp_map(&(v - dv)).coords()) / (2.0 * h);
                let rel = (fd - j.column(c)).norm() / fd.norm().max(1e-12);
                assert!(rel < 1e-6, "rel {rel}");
            }
        }

        // closed form at v = [π/2, 0, 0]: sinc = 2/π, cos = 0
        let v = Vec3::new(FRAC_PI_2, 0.0, 0.0);
        let j = jac_exp(&v);
        let s = 2.0 / PI;
        let k = (0.0 - s) / (FRAC_PI_2 * FRAC_PI_2);
        let expected = Matrix4x3::new(
            -FRAC_PI_2 * s,
            0.0,
            0.0, //
            k * FRAC_PI_2 * FRAC_PI_2 + s,
            0.0,
            0.0, //
            0.0,
            s,
            0.0, //
            0.0,
            0.0,
            s,
        );
        assert!((j - expected).amax() < 1e-8);
    }

    #[test]
    fn jac_log_limits_and_finite_differences() {
        let j0 = jac_log(&UnitQuat::identity()).unwrap();
        assert_eq!(j0.column(0).amax(), 0.0);
        assert!((j0.fixed_view::<3, 3>(0, 1) - Matrix3::identity()).amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            let j = jac_log(&q).unwrap() * tangent_lift(&q);
            for c in 0..3 {
                let mut e = Vec3::zeros();
                e[c] = h;
                let fd = (q.boxplus(&e).log() - q.boxplus(&-e).log()) / (2.0 * h);
                let rel = (fd - j.column(c)).norm() / fd.norm().max(1e-12);
                assert!(rel < 1e-5, "rel {rel}");
            }
        }
    }

    #[test]
    fn jac_log_inverts_jac_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let dir = random_vec(&mut rng, 1.0).normalize();
            let v = dir * rng.random_range(0.0..PI - 0.1);
            let prod = jac_log(&exp_map(&v)).unwrap() * jac_exp(&v);
            assert!((prod - Matrix3::identity()).amax() < 1e-8);
        }
        // small-angle branches compose too
        let v = Vec3::new(1e-5, 2e-5, -3e-5);
        let prod = jac_log(&exp_map(&v)).unwrap() * jac_exp(&v);
        assert!((prod - Matrix3::identity()).amax() < 1e-9);
    }

    #[test]
    fn jac_rotate_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        let sandwich = |q: &Vector4<f64>, x: &Vec3| {
            let xq = Vector4::new(0.0, x[0], x[1], x[2]);
            let conj = Vector4::new(q[0], -q[1], -q[2], -q[3]);
            let s = hamilton_raw(&hamilton_raw(q, &xq), &conj);
            Vec3::new(s[1], s[2], s[3])
        };
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let x = random_vec(&mut rng, 3.0);
            let j = jac_rotate(&q, &x);
            for c in 0..4 {
                let mut d = Vector4::zeros();
                d[c] = h;
                let fd = (sandwich(&(q.coords() + d), &x) - sandwich(&(q.coords() - d), &x)) / (2.0 * h);
                let rel = (fd - j.column(c)).norm() / fd.norm().max(1e-12);
                assert!(rel < 1e-6, "rel {rel}");
            }
        }
        let q = random_quat(&mut rng);
        assert_eq!(jac_rotate(&q, &Vec3::zeros()), Matrix3x4::zeros());
    }

    #[test]
    fn angle_to_is_sign_invariant() {
        let q = UnitQuat::from_axis_angle(&Vec3::z(), 0.3);
        assert!(close(UnitQuat::identity().angle_to(&q), 0.3, 1e-14));
        assert!(close(UnitQuat::identity().angle_to(&q.negated()), 0.3, 1e-14));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unit_norm_closure(a in proptest::array::uniform4(-1.0f64..1.0),
                                 b in proptest::array::uniform4(-1.0f64..1.0),
                                 v in proptest::array::uniform3(-3.0f64..3.0)) {
                prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-3);
                prop_assume!(b.iter().map(|x| x * x).sum::<f64>() > 1e-3);
                let qa = UnitQuat::new(a[0], a[1], a[2], a[3]);
                let qb = UnitQuat::new(b[0], b[1], b[2], b[3]);
                prop_assert!(((qa * qb).coords().norm() - 1.0).abs() < 1e-9);
                prop_assert!((qa.inverse().coords().norm() - 1.0).abs() < 1e-9);
                let e = exp_map(&Vec3::new(v[0], v[1], v[2]));
                prop_assert!((e.coords().norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
