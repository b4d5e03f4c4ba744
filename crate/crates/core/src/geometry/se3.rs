//! SE(3) rigid transforms and their tangent-space algebra.
//!
//! A [`RigidTransform`] acts on points as `p_out = R * p_in + t`. Chains read
//! right to left: `a.compose(&b)` applies `b` first, then `a`. Rotations are
//! stored as unit quaternions (scalar-last storage) and renormalized after
//! every composition so long chains cannot drift off the manifold.
//!
//! Twist ordering is `[rotation | translation]` everywhere, including the
//! 6x6 Jacobians used by the optimizers.

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

use super::GeometryError;

/// Quaternion renormalization and exp/log round-trip tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-9;
/// Below this rotation angle the exp/log maps switch to Taylor branches.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Element of SE(3): rotation (unit quaternion) plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

/// se(3) tangent vector: rotational part in radians, translational in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    /// Packs as `[wx, wy, wz, vx, vy, vz]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds from parts, renormalizing the quaternion.
    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Builds from raw quaternion components (may be unnormalized).
    pub fn from_quaternion_parts(
        qw: f64,
        qx: f64,
        qy: f64,
        qz: f64,
        translation: Vector3<f64>,
    ) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(Quaternion::new(qw, qx, qy, qz)),
            translation,
        }
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_matrix(r),
            translation,
        }
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let rotation =
            UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner());
        let translation = self.rotation * other.translation + self.translation;
        Self {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Max absolute difference over rotation matrix and translation entries.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let dr = (self.rotation_matrix() - other.rotation_matrix()).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map.
pub fn so3_exp(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = w.norm();
    if angle < SMALL_ANGLE {
        // First-order quaternion: [1, w/2] normalized.
        let q = Quaternion::new(1.0, w.x * 0.5, w.y * 0.5, w.z * 0.5);
        UnitQuaternion::new_normalize(q)
    } else {
        UnitQuaternion::from_scaled_axis(*w)
    }
}

/// SO(3) logarithm; the result has norm in [0, pi].
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.scaled_axis()
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = skew(w);
    if theta < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * wx + wx * wx / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() + (1.0 - theta.cos()) / t2 * wx
            + (theta - theta.sin()) / (t2 * theta) * (wx * wx)
    }
}

/// Inverse of the left Jacobian of SO(3).
pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = skew(w);
    if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * wx + wx * wx / 12.0
    } else {
        let half = 0.5 * theta;
        let cot = half / half.tan();
        Matrix3::identity() - 0.5 * wx + (1.0 - cot) / (theta * theta) * (wx * wx)
    }
}

/// Right Jacobian of SO(3): `Jr(w) = Jl(-w)`.
pub fn so3_right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&-w)
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian_inv(&-w)
}

/// SE(3) exponential map. Small rotations take a Taylor branch below
/// [`SMALL_ANGLE`].
pub fn se3_exp(xi: &Twist) -> RigidTransform {
    let rotation = so3_exp(&xi.rotation);
    let translation = so3_left_jacobian(&xi.rotation) * xi.translation;
    RigidTransform {
        rotation,
        translation,
    }
}

/// SE(3) logarithm. Fails when the rotation angle is within 1e-6 of pi,
/// where the axis is numerically unstable.
pub fn se3_log(t: &RigidTransform) -> Result<Twist, GeometryError> {
    let angle = t.rotation.angle();
    if angle > std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::LogSingularity { angle });
    }
    let w = so3_log(&t.rotation);
    let v = so3_left_jacobian_inv(&w) * t.translation;
    Ok(Twist::new(w, v))
}

/// Adjoint of a transform for `[rotation | translation]` twist ordering:
/// `Exp(adjoint(T) * xi) == T ∘ Exp(xi) ∘ T⁻¹`.
pub fn se3_adjoint(t: &RigidTransform) -> Matrix6<f64> {
    let r = t.rotation_matrix();
    let tr = skew(&t.translation) * r;
    let mut adj = Matrix6::zeros();
    adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    adj.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
    adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    adj
}

// Series-safe scalar coefficients used by the SE(3) Jacobian Q block.
fn coef_a(theta: f64) -> f64 {
    // (theta - sin theta) / theta^3
    if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / theta.powi(3)
    }
}

fn coef_b(theta: f64) -> f64 {
    // (1 - theta^2/2 - cos theta) / theta^4
    if theta < 1e-3 {
        let t2 = theta * theta;
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
    } else {
        (1.0 - 0.5 * theta * theta - theta.cos()) / theta.powi(4)
    }
}

fn coef_c(theta: f64) -> f64 {
    // (theta - sin theta - theta^3/6) / theta^5
    if theta < 1e-2 {
        let t2 = theta * theta;
        -1.0 / 120.0 + t2 / 5040.0 - t2 * t2 / 362_880.0
    } else {
        (theta - theta.sin() - theta.powi(3) / 6.0) / theta.powi(5)
    }
}

/// The translation-rotation coupling block of the SE(3) left Jacobian.
fn se3_q_block(xi: &Twist) -> Matrix3<f64> {
    let w = skew(&xi.rotation);
    let p = skew(&xi.translation);
    let theta = xi.rotation.norm();

    let a = coef_a(theta);
    let b = coef_b(theta);
    let c = 0.5 * (b - 3.0 * coef_c(theta));

    let wp = w * p;
    let pw = p * w;
    let wpw = wp * w;

    0.5 * p + a * (wp + pw + wpw) - b * (w * wp + pw * w - 3.0 * wpw)
        - c * (wpw * w + w * wpw)
}

/// Left Jacobian of SE(3): `Exp(xi + d) ≈ Exp(Jl(xi) d) ∘ Exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let jl = so3_left_jacobian(&xi.rotation);
    let q = se3_q_block(xi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    out
}

/// Inverse of the SE(3) left Jacobian.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let jl_inv = so3_left_jacobian_inv(&xi.rotation);
    let q = se3_q_block(xi);
    let cross = -jl_inv * q * jl_inv;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&cross);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    out
}

/// Inverse of the SE(3) right Jacobian: `Jr⁻¹(xi) = Jl⁻¹(-xi)`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let neg = Twist::new(-xi.rotation, -xi.translation);
    se3_left_jacobian_inv(&neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_twist(rng: &mut StdRng, rot_scale: f64, trans_scale: f64) -> Twist {
        let r = || -> f64 { 0.0 };
        let _ = r;
        let mut v = |s: f64| {
            Vector3::new(
                rng.random_range(-s..s),
                rng.random_range(-s..s),
                rng.random_range(-s..s),
            )
        };
        Twist::new(v(rot_scale), v(trans_scale))
    }

    fn random_transform(rng: &mut StdRng) -> RigidTransform {
        se3_exp(&random_twist(rng, 1.5, 2.0))
    }

    #[test]
    fn exp_of_zero_twist_is_identity() {
        let t = se3_exp(&Twist::zero());
        assert!(t.max_abs_diff(&RigidTransform::identity()) < 1e-15);
    }

    #[test]
    fn exp_of_pure_rotation_matches_axis_angle() {
        // 0.1 rad about x; compare against the closed-form rotation matrix.
        let t = se3_exp(&Twist::new(Vector3::new(0.1, 0.0, 0.0), Vector3::zeros()));
        let (s, c) = (0.1f64.sin(), 0.1f64.cos());
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        assert_relative_eq!(t.rotation_matrix(), expected, epsilon = 1e-12);
        assert!(t.translation().norm() < 1e-15);
    }

    #[test]
    fn exp_of_pure_translation() {
        let t = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)));
        assert!(t.rotation_angle() < 1e-15);
        assert_relative_eq!(*t.translation(), Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn log_of_identity_is_zero() {
        let xi = se3_log(&RigidTransform::identity()).unwrap();
        assert!(xi.norm() < 1e-15);
    }

    #[test]
    fn log_of_z_rotation() {
        let t = se3_exp(&Twist::new(Vector3::new(0.0, 0.0, 0.1), Vector3::zeros()));
        let xi = se3_log(&t).unwrap();
        assert_relative_eq!(xi.rotation, Vector3::new(0.0, 0.0, 0.1), epsilon = 1e-12);
        assert!(xi.translation.norm() < 1e-12);
    }

    #[test]
    fn log_near_pi_is_an_error() {
        let t = se3_exp(&Twist::new(
            Vector3::new(std::f64::consts::PI - 1e-9, 0.0, 0.0),
            Vector3::zeros(),
        ));
        assert!(matches!(
            se3_log(&t),
            Err(GeometryError::LogSingularity { .. })
        ));
    }

    #[test]
    fn exp_log_round_trip_1000_random_twists() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, 3.0 / f64::sqrt(3.0), 5.0);
            let back = se3_log(&se3_exp(&xi)).unwrap();
            worst = worst.max((back.to_vector() - xi.to_vector()).abs().max());
        }
        assert!(worst < 1e-9, "max round-trip error {worst}");
    }

    #[test]
    fn compose_with_identity() {
        let mut rng = StdRng::seed_from_u64(3);
        let b = random_transform(&mut rng);
        assert!(RigidTransform::identity().compose(&b).max_abs_diff(&b) < 1e-15);
        assert!(b.compose(&RigidTransform::identity()).max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn group_axioms_on_random_inputs() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            let p = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );

            // Associativity.
            let ab_c = a.compose(&b).compose(&c);
            let a_bc = a.compose(&b.compose(&c));
            assert!(ab_c.max_abs_diff(&a_bc) < 1e-12);

            // Inverse.
            let ident = a.compose(&a.inverse());
            assert!(ident.max_abs_diff(&RigidTransform::identity()) < 1e-12);

            // Quaternion stays unit.
            assert!((a.compose(&b).rotation().norm() - 1.0).abs() < UNIT_NORM_TOL);

            // Action compatibility.
            let lhs = a.compose(&b).transform_point(&p);
            let rhs = a.transform_point(&b.transform_point(&p));
            assert!((lhs - rhs).norm() < 1e-12);

            // transform_point on identity.
            assert!((RigidTransform::identity().transform_point(&p) - p).norm() == 0.0);
        }
    }

    #[test]
    fn adjoint_moves_twists_across_conjugation() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            let xi = random_twist(&mut rng, 0.5, 1.0);
            let lhs = t.compose(&se3_exp(&xi)).compose(&t.inverse());
            let adj_xi = Twist::from_vector(&(se3_adjoint(&t) * xi.to_vector()));
            let rhs = se3_exp(&adj_xi);
            assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }
    }

    #[test]
    fn se3_left_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..50 {
            let xi = random_twist(&mut rng, 0.8, 1.5);
            let jl = se3_left_jacobian(&xi);
            let base_inv = se3_exp(&xi).inverse();
            for col in 0..6 {
                let mut dp = xi.to_vector();
                let mut dm = xi.to_vector();
                dp[col] += h;
                dm[col] -= h;
                let tp = se3_exp(&Twist::from_vector(&dp));
                let tm = se3_exp(&Twist::from_vector(&dm));
                let dplus = se3_log(&tp.compose(&base_inv)).unwrap().to_vector();
                let dminus = se3_log(&tm.compose(&base_inv)).unwrap().to_vector();
                let fd = (dplus - dminus) / (2.0 * h);
                let analytic = jl.column(col);
                assert!(
                    (fd - analytic).abs().max() < 1e-5,
                    "column {col} mismatch: fd={fd:?} analytic={analytic:?}"
                );
            }
        }
    }

    #[test]
    fn se3_jacobian_inverse_is_inverse() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let xi = random_twist(&mut rng, 1.2, 2.0);
            let prod = se3_left_jacobian(&xi) * se3_left_jacobian_inv(&xi);
            assert!((prod - Matrix6::identity()).abs().max() < 1e-10);
        }
    }
}
