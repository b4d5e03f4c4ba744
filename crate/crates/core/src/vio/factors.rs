//! Inertial and prior residual blocks for the visual-inertial solvers.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, UnitQuaternion, Vector3};

use crate::geometry::{
    se3_log, skew, so3_left_jacobian_inv, so3_log, so3_right_jacobian, so3_right_jacobian_inv,
    RigidTransform,
};
use crate::solvers::{Factor, VarKey, Variable};

use super::preintegration::PreintegratedImu;
use super::GRAVITY;

/// Gravity vector for a tilt rotation: `R_g * [0, 0, 9.81]`.
pub fn gravity_vector(tilt: &UnitQuaternion<f64>) -> Vector3<f64> {
    tilt * Vector3::new(0.0, 0.0, GRAVITY)
}

/// World position of the body for a base-from-world pose.
pub fn body_position(pose: &RigidTransform) -> Vector3<f64> {
    -(pose.rotation().inverse() * pose.translation())
}

fn whitener(cov: &SMatrix<f64, 9, 9>) -> SMatrix<f64, 9, 9> {
    let mut c = *cov;
    // Jitter keeps freshly started (near-zero covariance) factors solvable.
    for i in 0..9 {
        c[(i, i)] += 1e-16;
    }
    let chol = c.cholesky().expect("preintegration covariance must be PSD");
    chol.l()
        .solve_lower_triangular(&SMatrix::<f64, 9, 9>::identity())
        .expect("triangular solve")
}

/// Preintegrated IMU factor between two 15-DoF states.
///
/// Connects `[pose_i, vel_i, pose_j, vel_j, accel_bias, gyro_bias, tilt]`;
/// whichever of those are not being estimated are simply held fixed by the
/// problem. The residual is ordered [rotation, velocity, position] and
/// whitened by the inverse Cholesky factor of the preintegration covariance.
pub struct ImuFactor {
    keys: [VarKey; 7],
    pre: PreintegratedImu,
    w: SMatrix<f64, 9, 9>,
}

impl ImuFactor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pose_i: VarKey,
        vel_i: VarKey,
        pose_j: VarKey,
        vel_j: VarKey,
        accel_bias: VarKey,
        gyro_bias: VarKey,
        tilt: VarKey,
        pre: PreintegratedImu,
    ) -> Self {
        let w = whitener(&pre.covariance);
        Self {
            keys: [pose_i, vel_i, pose_j, vel_j, accel_bias, gyro_bias, tilt],
            pre,
            w,
        }
    }
}

impl Factor for ImuFactor {
    fn variables(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        9
    }

    fn evaluate(
        &self,
        vars: &[&Variable],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let pose_i = vars[0].as_pose();
        let vel_i = vars[1].as_vec3();
        let pose_j = vars[2].as_pose();
        let vel_j = vars[3].as_vec3();
        let ba = vars[4].as_vec3();
        let bg = vars[5].as_vec3();
        let tilt = vars[6].as_tilt();

        let dt = self.pre.delta_time;
        let g = gravity_vector(tilt);
        let r_i = pose_i.rotation_matrix();
        let r_j = pose_j.rotation_matrix();
        let p_i = body_position(pose_i);
        let p_j = body_position(pose_j);

        let (dr_tilde, dv_tilde, dp_tilde) = self.pre.corrected_deltas(ba, bg);
        let dr_tilde_m = dr_tilde.to_rotation_matrix().into_inner();

        // Rotation residual: Log(dR~^T * R_wb_i^T * R_wb_j) with
        // R_wb = R_bw^T, so the product is dR~^T * R_i * R_j^T.
        let m = dr_tilde_m.transpose() * r_i * r_j.transpose();
        let r_rot = so3_log(&UnitQuaternion::from_matrix(&m));

        let u_v = vel_j - vel_i + g * dt;
        let r_vel = r_i * u_v - dv_tilde;

        let u_p = p_j - p_i - vel_i * dt + 0.5 * g * dt * dt;
        let r_pos = r_i * u_p - dp_tilde;

        let mut raw = DVector::zeros(9);
        raw.fixed_rows_mut::<3>(0).copy_from(&r_rot);
        raw.fixed_rows_mut::<3>(3).copy_from(&r_vel);
        raw.fixed_rows_mut::<3>(6).copy_from(&r_pos);

        if let Some(jacs) = jacobians {
            let jl_inv = so3_left_jacobian_inv(&r_rot);
            let jr_inv = so3_right_jacobian_inv(&r_rot);

            // Gravity columns: right-perturbation of the tilt about its two
            // free axes.
            let g_hat = Vector3::new(0.0, 0.0, GRAVITY);
            let dg_full = -(tilt.to_rotation_matrix().into_inner()) * skew(&g_hat);
            let dg = dg_full.fixed_view::<3, 2>(0, 0).into_owned();

            // d(rotation residual)/d(gyro bias) through the first-order
            // bias correction of the preintegrated rotation:
            // -Jl^-1(r) Jr(J dbg) J.
            let dbg = bg - self.pre.gyro_bias;
            let jr_corr = so3_right_jacobian(&(self.pre.d_rotation_d_gyro_bias * dbg));
            let d_rot_d_bg = -jl_inv * jr_corr * self.pre.d_rotation_d_gyro_bias;

            // pose_i block, twist order [rotation | translation].
            let mut j_pose_i = DMatrix::zeros(9, 6);
            j_pose_i
                .fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&(jl_inv * dr_tilde_m.transpose()));
            j_pose_i
                .fixed_view_mut::<3, 3>(3, 0)
                .copy_from(&(-skew(&(r_i * u_v))));
            j_pose_i
                .fixed_view_mut::<3, 3>(6, 0)
                .copy_from(&(-skew(&(r_i * u_p))));
            // World position responds only to the translational increment:
            // p_i' = p_i - R_i^T dv, so d r_pos / d dv_i = identity.
            j_pose_i
                .fixed_view_mut::<3, 3>(6, 3)
                .copy_from(&Matrix3::identity());

            let mut j_vel_i = DMatrix::zeros(9, 3);
            j_vel_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r_i));
            j_vel_i
                .fixed_view_mut::<3, 3>(6, 0)
                .copy_from(&(-r_i * dt));

            let mut j_pose_j = DMatrix::zeros(9, 6);
            j_pose_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv));
            j_pose_j
                .fixed_view_mut::<3, 3>(6, 3)
                .copy_from(&(-(r_i * r_j.transpose())));

            let mut j_vel_j = DMatrix::zeros(9, 3);
            j_vel_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&r_i);

            let mut j_ba = DMatrix::zeros(9, 3);
            j_ba.fixed_view_mut::<3, 3>(3, 0)
                .copy_from(&(-self.pre.d_velocity_d_accel_bias));
            j_ba.fixed_view_mut::<3, 3>(6, 0)
                .copy_from(&(-self.pre.d_position_d_accel_bias));

            let mut j_bg = DMatrix::zeros(9, 3);
            j_bg.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_rot_d_bg);
            j_bg.fixed_view_mut::<3, 3>(3, 0)
                .copy_from(&(-self.pre.d_velocity_d_gyro_bias));
            j_bg.fixed_view_mut::<3, 3>(6, 0)
                .copy_from(&(-self.pre.d_position_d_gyro_bias));

            let mut j_tilt = DMatrix::zeros(9, 2);
            j_tilt
                .fixed_view_mut::<3, 2>(3, 0)
                .copy_from(&(r_i * dt * dg));
            j_tilt
                .fixed_view_mut::<3, 2>(6, 0)
                .copy_from(&(r_i * (0.5 * dt * dt) * dg));

            let blocks = [j_pose_i, j_vel_i, j_pose_j, j_vel_j, j_ba, j_bg, j_tilt];
            for (out, block) in jacs.iter_mut().zip(blocks.into_iter()) {
                let whitened = DMatrix::from_fn(9, block.ncols(), |r, c| {
                    (0..9).map(|k| self.w[(r, k)] * block[(k, c)]).sum()
                });
                out.copy_from(&whitened);
            }
        }

        let mut out = DVector::zeros(9);
        for r in 0..9 {
            out[r] = (0..9).map(|k| self.w[(r, k)] * raw[k]).sum();
        }
        out
    }
}

/// Diagonal standard deviations of a 15-DoF state prior.
#[derive(Debug, Clone, Copy)]
pub struct PriorSigmas {
    pub rotation: f64,
    pub translation: f64,
    pub velocity: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for PriorSigmas {
    fn default() -> Self {
        Self {
            rotation: 1e-2,
            translation: 1e-2,
            velocity: 1e-1,
            accel_bias: 1e-1,
            gyro_bias: 1e-2,
        }
    }
}

/// Pins a 15-DoF state `[pose, velocity, accel bias, gyro bias]` to a mean.
/// The pose part is the left tangent difference `Log(T * mean^-1)`, matching
/// the left-multiplicative pose update.
pub struct StatePriorFactor {
    keys: [VarKey; 4],
    mean_pose: RigidTransform,
    mean_vel: Vector3<f64>,
    mean_ba: Vector3<f64>,
    mean_bg: Vector3<f64>,
    inv_sigmas: [f64; 5],
}

impl StatePriorFactor {
    pub fn new(
        pose: VarKey,
        vel: VarKey,
        accel_bias: VarKey,
        gyro_bias: VarKey,
        mean_pose: RigidTransform,
        mean_vel: Vector3<f64>,
        mean_ba: Vector3<f64>,
        mean_bg: Vector3<f64>,
        sigmas: PriorSigmas,
    ) -> Self {
        Self {
            keys: [pose, vel, accel_bias, gyro_bias],
            mean_pose,
            mean_vel,
            mean_ba,
            mean_bg,
            inv_sigmas: [
                1.0 / sigmas.rotation,
                1.0 / sigmas.translation,
                1.0 / sigmas.velocity,
                1.0 / sigmas.accel_bias,
                1.0 / sigmas.gyro_bias,
            ],
        }
    }
}

impl Factor for StatePriorFactor {
    fn variables(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        15
    }

    fn evaluate(
        &self,
        vars: &[&Variable],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let pose = vars[0].as_pose();
        let vel = vars[1].as_vec3();
        let ba = vars[2].as_vec3();
        let bg = vars[3].as_vec3();

        let err = pose.compose(&self.mean_pose.inverse());
        let xi = se3_log(&err).expect("prior error far from the log singularity");
        let [isr, ist, isv, isba, isbg] = self.inv_sigmas;

        let mut r = DVector::zeros(15);
        r.fixed_rows_mut::<3>(0).copy_from(&(xi.rotation * isr));
        r.fixed_rows_mut::<3>(3).copy_from(&(xi.translation * ist));
        r.fixed_rows_mut::<3>(6)
            .copy_from(&((vel - self.mean_vel) * isv));
        r.fixed_rows_mut::<3>(9)
            .copy_from(&((ba - self.mean_ba) * isba));
        r.fixed_rows_mut::<3>(12)
            .copy_from(&((bg - self.mean_bg) * isbg));

        if let Some(jacs) = jacobians {
            // d Log(Exp(d) T mean^-1) / dd = Jl^-1(xi).
            let jl_inv = crate::geometry::se3_left_jacobian_inv(&xi);
            let mut j_pose = DMatrix::zeros(15, 6);
            for row in 0..3 {
                for col in 0..6 {
                    j_pose[(row, col)] = jl_inv[(row, col)] * isr;
                    j_pose[(row + 3, col)] = jl_inv[(row + 3, col)] * ist;
                }
            }
            jacs[0].copy_from(&j_pose);
            let mut j_vel = DMatrix::zeros(15, 3);
            j_vel
                .fixed_view_mut::<3, 3>(6, 0)
                .copy_from(&(Matrix3::identity() * isv));
            jacs[1].copy_from(&j_vel);
            let mut j_ba = DMatrix::zeros(15, 3);
            j_ba.fixed_view_mut::<3, 3>(9, 0)
                .copy_from(&(Matrix3::identity() * isba));
            jacs[2].copy_from(&j_ba);
            let mut j_bg = DMatrix::zeros(15, 3);
            j_bg.fixed_view_mut::<3, 3>(12, 0)
                .copy_from(&(Matrix3::identity() * isbg));
            jacs[3].copy_from(&j_bg);
        }
        r
    }
}

/// Zero-mean prior on the stacked biases, `|b|^2` weighted by one sigma.
pub struct BiasPriorFactor {
    keys: [VarKey; 2],
    inv_sigma: f64,
}

impl BiasPriorFactor {
    pub fn new(accel_bias: VarKey, gyro_bias: VarKey, sigma: f64) -> Self {
        assert!(sigma > 0.0);
        Self {
            keys: [accel_bias, gyro_bias],
            inv_sigma: 1.0 / sigma,
        }
    }
}

impl Factor for BiasPriorFactor {
    fn variables(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        6
    }

    fn evaluate(
        &self,
        vars: &[&Variable],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let ba = vars[0].as_vec3();
        let bg = vars[1].as_vec3();
        let mut r = DVector::zeros(6);
        r.fixed_rows_mut::<3>(0).copy_from(&(ba * self.inv_sigma));
        r.fixed_rows_mut::<3>(3).copy_from(&(bg * self.inv_sigma));
        if let Some(jacs) = jacobians {
            let mut j_ba = DMatrix::zeros(6, 3);
            j_ba.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&(Matrix3::identity() * self.inv_sigma));
            jacs[0].copy_from(&j_ba);
            let mut j_bg = DMatrix::zeros(6, 3);
            j_bg.fixed_view_mut::<3, 3>(3, 0)
                .copy_from(&(Matrix3::identity() * self.inv_sigma));
            jacs[1].copy_from(&j_bg);
        }
        r
    }
}
