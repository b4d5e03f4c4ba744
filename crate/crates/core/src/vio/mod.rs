//! Visual-inertial estimation: 15-DoF states, IMU preintegration, gravity
//! initialization, per-frame fusion, and the inertial bundle adjustment.

mod estimator;
mod factors;
mod gravity;
mod preintegration;

pub use estimator::{
    propagate, vi_pose_estimate, vi_sba, ViFrameConfig, ViSbaConfig, ViSbaResult,
    VisualObservation,
};
pub use factors::{body_position, gravity_vector, BiasPriorFactor, ImuFactor, PriorSigmas,
    StatePriorFactor};
pub use gravity::{estimate_gravity, GravityInit, GravityInitConfig};
pub use preintegration::{
    preintegrate, ImuNoise, ImuSample, PreintegratedImu, RELINEARIZATION_THRESHOLD,
};

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::RigidTransform;

/// Gravity magnitude, m/s^2.
pub const GRAVITY: f64 = 9.81;

/// 15-DoF robot state: pose, world-frame velocity, and the two IMU biases.
#[derive(Debug, Clone, Copy)]
pub struct VioState {
    /// Base-from-world transform.
    pub pose: RigidTransform,
    /// m/s, world frame.
    pub velocity: Vector3<f64>,
    /// m/s^2.
    pub accel_bias: Vector3<f64>,
    /// rad/s.
    pub gyro_bias: Vector3<f64>,
}

impl VioState {
    pub fn stationary(pose: RigidTransform) -> Self {
        Self {
            pose,
            velocity: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }

    /// Max-norm distance to another state over all components.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.pose
            .max_abs_diff(&other.pose)
            .max((self.velocity - other.velocity).abs().max())
            .max((self.accel_bias - other.accel_bias).abs().max())
            .max((self.gyro_bias - other.gyro_bias).abs().max())
    }
}

/// Direction of gravity as a rotation applied to the nominal down axis;
/// the magnitude is pinned to 9.81 by construction.
#[derive(Debug, Clone, Copy)]
pub struct GravityEstimate {
    tilt: UnitQuaternion<f64>,
}

impl GravityEstimate {
    pub fn new(tilt: UnitQuaternion<f64>) -> Self {
        Self { tilt }
    }

    pub fn aligned() -> Self {
        Self {
            tilt: UnitQuaternion::identity(),
        }
    }

    pub fn tilt(&self) -> UnitQuaternion<f64> {
        self.tilt
    }

    /// The world-frame gravity vector `R_g * [0, 0, 9.81]`.
    pub fn vector(&self) -> Vector3<f64> {
        factors::gravity_vector(&self.tilt)
    }
}

#[derive(Debug, Error)]
pub enum VioError {
    #[error("need at least two IMU samples, got {count}")]
    TooFewSamples { count: usize },
    #[error("IMU timestamps must be strictly increasing (violated at {at})")]
    NonMonotonicTimestamps { at: f64 },
    #[error("visual-inertial stage not ready: {reason}")]
    NotReady { reason: &'static str },
    #[error("visual-inertial optimization did not converge")]
    NoConvergence,
}
