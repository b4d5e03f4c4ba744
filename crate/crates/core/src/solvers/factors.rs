//! Reprojection residual blocks.
//!
//! Residual: `pi(T_cb * T_bw * p_w) - measured`, whitened by the pixel sigma.
//! Points that land behind the camera during a trial step are evaluated with
//! the depth clamped to the projection epsilon, which produces a huge but
//! finite residual; the robust loss and the step-acceptance test then reject
//! such steps without poisoning the solve with non-finite values.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::geometry::{skew, CameraModel, RigidTransform, DEPTH_EPSILON};

use super::problem::{Factor, VarKey, Variable};

fn clamped_camera_point(p: Vector3<f64>) -> Vector3<f64> {
    if p.z <= DEPTH_EPSILON {
        Vector3::new(p.x, p.y, DEPTH_EPSILON)
    } else {
        p
    }
}

fn project_clamped(model: &CameraModel, p_cam: &Vector3<f64>) -> (Vector2<f64>, Matrix2x3<f64>) {
    let p = clamped_camera_point(*p_cam);
    let px = Vector2::new(
        model.fx * p.x / p.z + model.cx,
        model.fy * p.y / p.z + model.cy,
    );
    (px, model.project_jacobian(&p))
}

/// Reprojection of an optimized landmark seen from an optimized pose.
pub struct ReprojectionFactor {
    keys: [VarKey; 2],
    model: CameraModel,
    /// Camera-from-base extrinsic.
    extrinsic: RigidTransform,
    measured: Vector2<f64>,
    inv_sigma: f64,
    huber: Option<f64>,
}

impl ReprojectionFactor {
    pub fn new(
        pose: VarKey,
        point: VarKey,
        model: CameraModel,
        extrinsic: RigidTransform,
        measured: Vector2<f64>,
        sigma: f64,
        huber: Option<f64>,
    ) -> Self {
        assert!(sigma > 0.0);
        Self {
            keys: [pose, point],
            model,
            extrinsic,
            measured,
            inv_sigma: 1.0 / sigma,
            huber,
        }
    }
}

impl Factor for ReprojectionFactor {
    fn variables(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        2
    }

    fn evaluate(
        &self,
        vars: &[&Variable],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let pose = vars[0].as_pose();
        let point = vars[1].as_point();
        let body = pose.transform_point(point);
        let cam = self.extrinsic.transform_point(&body);
        let (px, jproj) = project_clamped(&self.model, &cam);
        let r = (px - self.measured) * self.inv_sigma;

        if let Some(jacs) = jacobians {
            let r_cb = self.extrinsic.rotation_matrix();
            // d(cam)/d(pose delta) with the left-multiplicative update:
            // body' = body + dw x body + dv.
            let dcam_dw = -r_cb * skew(&body);
            let a = jproj * self.inv_sigma;
            let jw = a * dcam_dw;
            let jv = a * r_cb;
            for c in 0..3 {
                jacs[0].set_column(c, &jw.column(c).clone_owned());
                jacs[0].set_column(3 + c, &jv.column(c).clone_owned());
            }
            let dcam_dp: Matrix3<f64> = r_cb * pose.rotation_matrix();
            jacs[1].copy_from(&(a * dcam_dp));
        }
        DVector::from_iterator(2, r.iter().copied())
    }

    fn huber_delta(&self) -> Option<f64> {
        self.huber
    }
}

/// Reprojection of a known (constant) landmark seen from an optimized pose.
/// This is the PnP and loop-delta building block.
#[derive(Clone)]
pub struct FixedPointReprojection {
    keys: [VarKey; 1],
    model: CameraModel,
    extrinsic: RigidTransform,
    point: Vector3<f64>,
    measured: Vector2<f64>,
    inv_sigma: f64,
    huber: Option<f64>,
}

impl FixedPointReprojection {
    pub fn new(
        pose: VarKey,
        point: Vector3<f64>,
        model: CameraModel,
        extrinsic: RigidTransform,
        measured: Vector2<f64>,
        sigma: f64,
        huber: Option<f64>,
    ) -> Self {
        assert!(sigma > 0.0);
        Self {
            keys: [pose],
            model,
            extrinsic,
            point,
            measured,
            inv_sigma: 1.0 / sigma,
            huber,
        }
    }

    /// Whitened residual at a given pose, without touching the problem.
    pub fn residual_at(&self, pose: &RigidTransform) -> Vector2<f64> {
        let body = pose.transform_point(&self.point);
        let cam = self.extrinsic.transform_point(&body);
        let (px, _) = project_clamped(&self.model, &cam);
        (px - self.measured) * self.inv_sigma
    }
}

impl Factor for FixedPointReprojection {
    fn variables(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        2
    }

    fn evaluate(
        &self,
        vars: &[&Variable],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let pose = vars[0].as_pose();
        let body = pose.transform_point(&self.point);
        let cam = self.extrinsic.transform_point(&body);
        let (px, jproj) = project_clamped(&self.model, &cam);
        let r = (px - self.measured) * self.inv_sigma;

        if let Some(jacs) = jacobians {
            let r_cb = self.extrinsic.rotation_matrix();
            let a = jproj * self.inv_sigma;
            let jw = a * (-r_cb * skew(&body));
            let jv = a * r_cb;
            for c in 0..3 {
                jacs[0].set_column(c, &jw.column(c).clone_owned());
                jacs[0].set_column(3 + c, &jv.column(c).clone_owned());
            }
        }
        DVector::from_iterator(2, r.iter().copied())
    }

    fn huber_delta(&self) -> Option<f64> {
        self.huber
    }
}
