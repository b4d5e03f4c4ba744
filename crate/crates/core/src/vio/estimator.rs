//! Per-frame visual-inertial pose estimation and visual-inertial bundle
//! adjustment.

use nalgebra::Vector3;

use crate::geometry::{CameraRig, RigidTransform};
use crate::localmap::{KeyframeId, LandmarkId, MapSnapshot};
use crate::solvers::{
    FixedPointReprojection, LinearSolver, LmReport, LmSettings, Problem, ReprojectionFactor,
    Termination, VarKey,
};

use super::factors::{ImuFactor, PriorSigmas, StatePriorFactor};
use super::preintegration::PreintegratedImu;
use super::{GravityEstimate, VioError, VioState};

/// A landmark observation used as a unary visual factor on one state.
#[derive(Debug, Clone, Copy)]
pub struct VisualObservation {
    pub point: Vector3<f64>,
    pub camera: usize,
    pub pixel: nalgebra::Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct ViFrameConfig {
    pub pixel_sigma: f64,
    pub huber_delta: Option<f64>,
    pub prior: PriorSigmas,
    pub lm: LmSettings,
}

impl Default for ViFrameConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            huber_delta: Some(1.345),
            prior: PriorSigmas::default(),
            lm: LmSettings {
                max_iterations: 30,
                ..LmSettings::default()
            },
        }
    }
}

/// IMU forward propagation of a state across a preintegration interval.
pub fn propagate(state: &VioState, pre: &PreintegratedImu, gravity: &GravityEstimate) -> VioState {
    let (dr, dv, dp) = pre.corrected_deltas(&state.accel_bias, &state.gyro_bias);
    let g = gravity.vector();
    let dt = pre.delta_time;
    let r_wb_i = state.pose.rotation().inverse();
    let p_i = super::factors::body_position(&state.pose);

    let v_j = state.velocity - g * dt + r_wb_i * dv;
    let p_j = p_i + state.velocity * dt - 0.5 * g * dt * dt + r_wb_i * dp;
    let r_wb_j = r_wb_i * dr;

    // Back to base-from-world: R = R_wb^T, t = -R p.
    let r_bw = r_wb_j.inverse();
    let pose = RigidTransform::from_parts(r_bw, -(r_bw * p_j));
    VioState {
        pose,
        velocity: v_j,
        accel_bias: state.accel_bias,
        gyro_bias: state.gyro_bias,
    }
}

/// Two-state sliding estimation: the previous state is constrained by a
/// prior at its current estimate, both states by the IMU factor, and each
/// by its own visual factors. The current state seeds from IMU propagation
/// unless an explicit initialization is supplied.
#[allow(clippy::too_many_arguments)]
pub fn vi_pose_estimate(
    prev: &VioState,
    curr_init: Option<&VioState>,
    pre: &PreintegratedImu,
    visual_prev: &[VisualObservation],
    visual_curr: &[VisualObservation],
    rig: &CameraRig,
    gravity: &GravityEstimate,
    config: &ViFrameConfig,
) -> Result<(VioState, VioState, LmReport), VioError> {
    let seeded = curr_init
        .copied()
        .unwrap_or_else(|| propagate(prev, pre, gravity));

    let mut problem = Problem::new();
    let pose_p = problem.add_pose(prev.pose);
    let vel_p = problem.add_vec3(prev.velocity);
    let pose_c = problem.add_pose(seeded.pose);
    let vel_c = problem.add_vec3(seeded.velocity);
    let ba = problem.add_vec3(prev.accel_bias);
    let bg = problem.add_vec3(prev.gyro_bias);
    let tilt = problem.add_tilt(gravity.tilt());
    problem.set_fixed(tilt);

    problem.add_factor(Box::new(ImuFactor::new(
        pose_p,
        vel_p,
        pose_c,
        vel_c,
        ba,
        bg,
        tilt,
        pre.clone(),
    )));
    problem.add_factor(Box::new(StatePriorFactor::new(
        pose_p,
        vel_p,
        ba,
        bg,
        prev.pose,
        prev.velocity,
        prev.accel_bias,
        prev.gyro_bias,
        config.prior,
    )));
    for (obs, pose_key) in visual_prev
        .iter()
        .map(|o| (o, pose_p))
        .chain(visual_curr.iter().map(|o| (o, pose_c)))
    {
        let cam = rig.camera(obs.camera);
        problem.add_factor(Box::new(FixedPointReprojection::new(
            pose_key,
            obs.point,
            cam.model,
            cam.extrinsic,
            obs.pixel,
            config.pixel_sigma,
            config.huber_delta,
        )));
    }

    let report = problem
        .solve(&config.lm, LinearSolver::Dense)
        .map_err(|_| VioError::NoConvergence)?;
    if report.termination == Termination::LambdaExhausted && report.accepted_steps == 0 {
        return Err(VioError::NoConvergence);
    }

    let accel_bias = *problem.var(ba).as_vec3();
    let gyro_bias = *problem.var(bg).as_vec3();
    let refined_prev = VioState {
        pose: *problem.var(pose_p).as_pose(),
        velocity: *problem.var(vel_p).as_vec3(),
        accel_bias,
        gyro_bias,
    };
    let refined_curr = VioState {
        pose: *problem.var(pose_c).as_pose(),
        velocity: *problem.var(vel_c).as_vec3(),
        accel_bias,
        gyro_bias,
    };
    Ok((refined_prev, refined_curr, report))
}

#[derive(Debug, Clone)]
pub struct ViSbaConfig {
    pub pixel_sigma: f64,
    pub huber_delta: Option<f64>,
    pub lm: LmSettings,
    /// Bias update norm that forces an immediate relinearization of the
    /// inertial factors.
    pub relinearize_update_norm: f64,
    /// Relinearize at least every this many LM iterations.
    pub relinearize_every: usize,
}

impl Default for ViSbaConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            huber_delta: Some(1.345),
            lm: LmSettings {
                max_iterations: 40,
                ..LmSettings::default()
            },
            relinearize_update_norm: 1e-2,
            relinearize_every: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViSbaResult {
    pub states: Vec<(KeyframeId, VioState)>,
    pub landmarks: Vec<(LandmarkId, Vector3<f64>)>,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Joint visual-inertial refinement of a keyframe window.
///
/// `states[i]` pairs with `snapshot.keyframes[i]`; `preintegrations[i]`
/// spans keyframes `i -> i+1`. Inertial factors are re-targeted to the
/// current bias estimate whenever it moves beyond the configured norm, and
/// in any case after every block of iterations. The first pose and first
/// velocity are held to fix the gauge.
pub fn vi_sba(
    states: &[VioState],
    snapshot: &MapSnapshot,
    preintegrations: &[PreintegratedImu],
    rig: &CameraRig,
    gravity: &GravityEstimate,
    config: &ViSbaConfig,
) -> Result<ViSbaResult, VioError> {
    if states.len() < 2
        || states.len() != snapshot.keyframes.len()
        || preintegrations.len() + 1 != states.len()
    {
        return Err(VioError::NotReady {
            reason: "window needs at least two aligned states",
        });
    }

    let mut current: Vec<VioState> = states.to_vec();
    let mut landmarks: Vec<(LandmarkId, Vector3<f64>)> = snapshot
        .landmarks
        .iter()
        .map(|l| (l.id, l.position))
        .collect();
    let mut lin_ba = current[0].accel_bias;
    let mut lin_bg = current[0].gyro_bias;
    let mut total_iterations = 0;
    let mut final_cost = f64::INFINITY;

    while total_iterations < config.lm.max_iterations {
        let mut problem = Problem::new();
        let mut pose_keys: Vec<VarKey> = Vec::new();
        let mut vel_keys: Vec<VarKey> = Vec::new();
        for s in &current {
            pose_keys.push(problem.add_pose(s.pose));
            vel_keys.push(problem.add_vec3(s.velocity));
        }
        problem.set_fixed(pose_keys[0]);
        problem.set_fixed(vel_keys[0]);
        let ba = problem.add_vec3(lin_ba);
        let bg = problem.add_vec3(lin_bg);
        let tilt = problem.add_tilt(gravity.tilt());
        problem.set_fixed(tilt);

        let mut point_keys: Vec<(LandmarkId, VarKey)> = Vec::new();
        for (id, pos) in &landmarks {
            point_keys.push((*id, problem.add_point(*pos)));
        }

        for (i, pre) in preintegrations.iter().enumerate() {
            problem.add_factor(Box::new(ImuFactor::new(
                pose_keys[i],
                vel_keys[i],
                pose_keys[i + 1],
                vel_keys[i + 1],
                ba,
                bg,
                tilt,
                pre.retarget(lin_ba, lin_bg),
            )));
        }
        for obs in &snapshot.observations {
            let Some(pose_idx) = snapshot.keyframes.iter().position(|k| k.id == obs.keyframe)
            else {
                continue;
            };
            let Some((_, pk)) = point_keys.iter().find(|(id, _)| *id == obs.landmark) else {
                continue;
            };
            let cam = rig.camera(obs.camera);
            problem.add_factor(Box::new(ReprojectionFactor::new(
                pose_keys[pose_idx],
                *pk,
                cam.model,
                cam.extrinsic,
                obs.pixel,
                config.pixel_sigma,
                config.huber_delta,
            )));
        }

        let chunk = LmSettings {
            max_iterations: config
                .relinearize_every
                .min(config.lm.max_iterations - total_iterations),
            ..config.lm.clone()
        };
        let report = problem
            .solve(&chunk, LinearSolver::SchurPoints)
            .map_err(|_| VioError::NoConvergence)?;
        total_iterations += report.iterations.max(1);
        final_cost = report.final_cost;

        let new_ba = *problem.var(ba).as_vec3();
        let new_bg = *problem.var(bg).as_vec3();
        for (i, s) in current.iter_mut().enumerate() {
            s.pose = *problem.var(pose_keys[i]).as_pose();
            s.velocity = *problem.var(vel_keys[i]).as_vec3();
            s.accel_bias = new_ba;
            s.gyro_bias = new_bg;
        }
        for ((_, pos), (_, key)) in landmarks.iter_mut().zip(point_keys.iter()) {
            *pos = *problem.var(*key).as_point();
        }

        let bias_update =
            ((new_ba - lin_ba).norm_squared() + (new_bg - lin_bg).norm_squared()).sqrt();
        lin_ba = new_ba;
        lin_bg = new_bg;

        // Converged and the linearization point barely moved: done.
        if report.termination != Termination::MaxIterations
            && bias_update <= config.relinearize_update_norm
        {
            break;
        }
    }

    Ok(ViSbaResult {
        states: snapshot
            .keyframes
            .iter()
            .zip(current)
            .map(|(kf, s)| (kf.id, s))
            .collect(),
        landmarks,
        final_cost,
        iterations: total_iterations,
    })
}
