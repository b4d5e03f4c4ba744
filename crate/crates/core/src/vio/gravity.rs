//! Gravity-direction, bias, and velocity initialization.
//!
//! With the visually estimated keyframe poses held fixed, a small LM solve
//! over the gravity tilt (2 DoF; rotation about gravity is unobservable),
//! the two biases, and the per-keyframe velocities brings the inertial
//! factors into agreement with the visual trajectory. A bias prior keeps
//! the problem well conditioned.

use nalgebra::{UnitQuaternion, Vector3};

use crate::geometry::RigidTransform;
use crate::solvers::{LinearSolver, LmSettings, Problem, Termination};

use super::factors::{body_position, BiasPriorFactor, ImuFactor};
use super::preintegration::PreintegratedImu;
use super::{GravityEstimate, VioError};

#[derive(Debug, Clone)]
pub struct GravityInitConfig {
    /// Prior standard deviation on both biases.
    pub bias_prior_sigma: f64,
    /// Minimum accelerometer sample variance ((m/s^2)^2); anything below
    /// means the platform is not excited enough to observe the biases.
    pub excitation_threshold: f64,
    pub lm: LmSettings,
}

impl Default for GravityInitConfig {
    fn default() -> Self {
        Self {
            bias_prior_sigma: 0.1,
            excitation_threshold: 0.05,
            lm: LmSettings {
                max_iterations: 100,
                ..LmSettings::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct GravityInit {
    pub gravity: GravityEstimate,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    /// One velocity per input pose, world frame.
    pub velocities: Vec<Vector3<f64>>,
    pub final_cost: f64,
}

/// Estimates the gravity rotation, biases, and keyframe velocities from
/// fixed poses and the preintegrations between them.
///
/// `poses` are base-from-world keyframe poses; `preintegrations[i]` spans
/// poses `i -> i+1`. Fails with [`VioError::NotReady`] when the motion does
/// not excite the accelerometer.
pub fn estimate_gravity(
    poses: &[RigidTransform],
    preintegrations: &[PreintegratedImu],
    config: &GravityInitConfig,
) -> Result<GravityInit, VioError> {
    if poses.len() < 3 || preintegrations.len() + 1 != poses.len() {
        return Err(VioError::NotReady {
            reason: "need at least three keyframes with preintegrations between them",
        });
    }

    // Excitation gate: sample variance of the accelerometer stream.
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for pre in preintegrations {
        for a in pre.accel_samples() {
            sum += a;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let variance = preintegrations
        .iter()
        .flat_map(|p| p.accel_samples())
        .map(|a| (a - mean).norm_squared())
        .sum::<f64>()
        / count as f64;
    if variance < config.excitation_threshold {
        return Err(VioError::NotReady {
            reason: "insufficient accelerometer excitation",
        });
    }

    let mut problem = Problem::new();
    let mut pose_keys = Vec::with_capacity(poses.len());
    for pose in poses {
        let key = problem.add_pose(*pose);
        problem.set_fixed(key);
        pose_keys.push(key);
    }

    // Velocity initial guesses from pose differences.
    let positions: Vec<Vector3<f64>> = poses.iter().map(body_position).collect();
    let mut vel_keys = Vec::with_capacity(poses.len());
    for i in 0..poses.len() {
        let v = if i + 1 < poses.len() {
            (positions[i + 1] - positions[i]) / preintegrations[i].delta_time
        } else {
            (positions[i] - positions[i - 1]) / preintegrations[i - 1].delta_time
        };
        vel_keys.push(problem.add_vec3(v));
    }

    let ba_key = problem.add_vec3(Vector3::zeros());
    let bg_key = problem.add_vec3(Vector3::zeros());
    let tilt_key = problem.add_tilt(UnitQuaternion::identity());

    for (i, pre) in preintegrations.iter().enumerate() {
        problem.add_factor(Box::new(ImuFactor::new(
            pose_keys[i],
            vel_keys[i],
            pose_keys[i + 1],
            vel_keys[i + 1],
            ba_key,
            bg_key,
            tilt_key,
            pre.clone(),
        )));
    }
    problem.add_factor(Box::new(BiasPriorFactor::new(
        ba_key,
        bg_key,
        config.bias_prior_sigma,
    )));

    let report = problem
        .solve(&config.lm, LinearSolver::Dense)
        .map_err(|_| VioError::NoConvergence)?;
    if report.termination == Termination::LambdaExhausted && report.accepted_steps == 0 {
        return Err(VioError::NoConvergence);
    }

    Ok(GravityInit {
        gravity: GravityEstimate::new(*problem.var(tilt_key).as_tilt()),
        accel_bias: *problem.var(ba_key).as_vec3(),
        gyro_bias: *problem.var(bg_key).as_vec3(),
        velocities: vel_keys
            .iter()
            .map(|k| *problem.var(*k).as_vec3())
            .collect(),
        final_cost: report.final_cost,
    })
}
