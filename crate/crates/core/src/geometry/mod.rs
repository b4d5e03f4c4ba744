//! SE(3) algebra, pinhole cameras, rig extrinsics, and noise models.
//!
//! Every operation here is a pure function on immutable values and safe to
//! call concurrently.

mod camera;
mod noise;
mod se3;

pub use camera::{CameraModel, CameraRig, RigCamera, DEPTH_EPSILON};
pub use noise::{huber_cost, huber_sqrt_weight, NoiseKind, NoiseModel};
pub use se3::{
    se3_adjoint, se3_exp, se3_left_jacobian, se3_left_jacobian_inv, se3_log,
    se3_right_jacobian_inv, skew, so3_exp, so3_left_jacobian, so3_left_jacobian_inv, so3_log,
    so3_right_jacobian, so3_right_jacobian_inv, RigidTransform, Twist, SMALL_ANGLE, UNIT_NORM_TOL,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth must be positive (got {depth})")]
    InvalidDepth { depth: f64 },
    #[error("rotation angle {angle} is too close to pi for a stable log map")]
    LogSingularity { angle: f64 },
}
