//! Sparse bundle adjustment over a local-map snapshot.
//!
//! Joint refinement of window poses and landmarks under reprojection error.
//! Each LM iteration eliminates the landmark blocks first and solves the
//! reduced pose system densely (the window holds on the order of ten poses),
//! then back-substitutes the landmark updates. The gauge is fixed by holding
//! the oldest window pose constant.

use nalgebra::Vector3;

use crate::geometry::{CameraRig, RigidTransform};
use crate::localmap::{KeyframeId, LandmarkId, MapSnapshot};

use super::factors::ReprojectionFactor;
use super::problem::{LinearSolver, LmReport, LmSettings, Problem, VarKey};
use super::SolverError;

#[derive(Debug, Clone)]
pub struct SbaConfig {
    pub pixel_sigma: f64,
    pub huber_delta: Option<f64>,
    pub lm: LmSettings,
}

impl Default for SbaConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            huber_delta: Some(1.345),
            lm: LmSettings {
                max_iterations: 20,
                ..LmSettings::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SbaResult {
    pub poses: Vec<(KeyframeId, RigidTransform)>,
    pub landmarks: Vec<(LandmarkId, Vector3<f64>)>,
    /// Landmarks whose damped block failed to invert and were held fixed.
    pub dropped: Vec<LandmarkId>,
    pub initial_rmse_px: f64,
    pub final_rmse_px: f64,
    pub report: LmReport,
}

fn rmse_px(problem: &Problem, n_obs: usize, sigma: f64) -> f64 {
    if n_obs == 0 {
        return 0.0;
    }
    // cost is the sum of whitened squared norms (no robust clipping assumed
    // for reporting purposes).
    (problem.cost() / n_obs as f64).sqrt() * sigma
}

/// Refines all window poses and landmarks of the snapshot.
pub fn sparse_bundle_adjustment(
    snapshot: &MapSnapshot,
    rig: &CameraRig,
    config: &SbaConfig,
) -> Result<SbaResult, SolverError> {
    if snapshot.keyframes.is_empty() || snapshot.observations.is_empty() {
        return Err(SolverError::InsufficientConstraints { needed: 1, got: 0 });
    }

    let mut problem = Problem::new();
    let mut pose_keys: Vec<(KeyframeId, VarKey)> = Vec::new();
    for kf in &snapshot.keyframes {
        let key = problem.add_pose(kf.pose);
        pose_keys.push((kf.id, key));
    }
    // Gauge: hold the oldest pose.
    problem.set_fixed(pose_keys[0].1);

    let mut point_keys: Vec<(LandmarkId, VarKey)> = Vec::new();
    for lm in &snapshot.landmarks {
        let key = problem.add_point(lm.position);
        point_keys.push((lm.id, key));
    }

    let pose_key = |id: KeyframeId| pose_keys.iter().find(|(k, _)| *k == id).map(|(_, v)| *v);
    let point_key = |id: LandmarkId| point_keys.iter().find(|(k, _)| *k == id).map(|(_, v)| *v);

    let mut n_obs = 0;
    for obs in &snapshot.observations {
        let (Some(pk), Some(lk)) = (pose_key(obs.keyframe), point_key(obs.landmark)) else {
            continue;
        };
        let cam = rig.camera(obs.camera);
        problem.add_factor(Box::new(ReprojectionFactor::new(
            pk,
            lk,
            cam.model,
            cam.extrinsic,
            obs.pixel,
            config.pixel_sigma,
            config.huber_delta,
        )));
        n_obs += 1;
    }
    if n_obs == 0 {
        return Err(SolverError::InsufficientConstraints { needed: 1, got: 0 });
    }

    let initial_rmse_px = rmse_px(&problem, n_obs, config.pixel_sigma);
    let report = problem
        .solve(&config.lm, LinearSolver::SchurPoints)
        .map_err(|_| SolverError::NoConvergence)?;
    let final_rmse_px = rmse_px(&problem, n_obs, config.pixel_sigma);

    let poses = pose_keys
        .iter()
        .map(|(id, key)| (*id, *problem.var(*key).as_pose()))
        .collect();
    let landmarks = point_keys
        .iter()
        .map(|(id, key)| (*id, *problem.var(*key).as_point()))
        .collect();
    let dropped = report
        .dropped_points
        .iter()
        .filter_map(|vk| {
            point_keys
                .iter()
                .find(|(_, key)| key == vk)
                .map(|(id, _)| *id)
        })
        .collect();

    Ok(SbaResult {
        poses,
        landmarks,
        dropped,
        initial_rmse_px,
        final_rmse_px,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, CameraModel, RigCamera, Twist};
    use crate::localmap::{Keyframe, Landmark, Observation};
    use crate::solvers::problem::LinearSolver;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn stereo_rig() -> CameraRig {
        let model = CameraModel::new(400.0, 400.0, 320.0, 240.0, 640, 480);
        CameraRig::new(vec![
            RigCamera {
                model,
                extrinsic: RigidTransform::identity(),
            },
            RigCamera {
                model,
                extrinsic: se3_exp(&Twist::new(
                    Vector3::zeros(),
                    Vector3::new(-0.1, 0.0, 0.0),
                )),
            },
        ])
    }

    /// Builds a noise-free snapshot with optional perturbations applied to
    /// the stored poses/landmarks (observations stay exact).
    fn synthetic_snapshot(
        rng: &mut StdRng,
        n_poses: usize,
        n_landmarks: usize,
        pose_noise: f64,
        point_noise: f64,
    ) -> (MapSnapshot, Vec<RigidTransform>, Vec<Vector3<f64>>) {
        let rig = stereo_rig();
        let gt_points: Vec<Vector3<f64>> = (0..n_landmarks)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(3.0..9.0),
                )
            })
            .collect();
        let gt_poses: Vec<RigidTransform> = (0..n_poses)
            .map(|i| {
                se3_exp(&Twist::new(
                    Vector3::new(0.0, 0.02 * i as f64, 0.0),
                    Vector3::new(0.05 * i as f64, 0.0, 0.0),
                ))
            })
            .collect();

        let mut keyframes = Vec::new();
        let mut landmarks = Vec::new();
        let mut observations = Vec::new();
        for (i, pose) in gt_poses.iter().enumerate() {
            let noisy = if i == 0 || pose_noise == 0.0 {
                *pose
            } else {
                se3_exp(&Twist::new(
                    Vector3::new(
                        rng.random_range(-pose_noise..pose_noise),
                        rng.random_range(-pose_noise..pose_noise),
                        rng.random_range(-pose_noise..pose_noise),
                    ),
                    Vector3::new(
                        rng.random_range(-pose_noise..pose_noise),
                        rng.random_range(-pose_noise..pose_noise),
                        rng.random_range(-pose_noise..pose_noise),
                    ),
                ))
                .compose(pose)
            };
            keyframes.push(Keyframe {
                id: i as u64,
                timestamp: i as f64 * 0.1,
                pose: noisy,
            });
            for (j, p) in gt_points.iter().enumerate() {
                for (k, cam) in rig.cameras().iter().enumerate() {
                    let pc = cam.extrinsic.transform_point(&pose.transform_point(p));
                    if let Ok(px) = cam.model.project(&pc) {
                        if cam.model.contains(&px, 1.0) {
                            observations.push(Observation {
                                landmark: j as u64,
                                keyframe: i as u64,
                                camera: k,
                                pixel: px,
                            });
                        }
                    }
                }
            }
        }
        for (j, p) in gt_points.iter().enumerate() {
            let noisy = p + Vector3::new(
                rng.random_range(-1.0..1.0) * point_noise,
                rng.random_range(-1.0..1.0) * point_noise,
                rng.random_range(-1.0..1.0) * point_noise,
            );
            landmarks.push(Landmark {
                id: j as u64,
                position: noisy,
            });
        }
        (
            MapSnapshot {
                keyframes,
                landmarks,
                observations,
            },
            gt_poses,
            gt_points,
        )
    }

    #[test]
    fn perturbed_scene_converges_to_tiny_rmse() {
        let mut rng = StdRng::seed_from_u64(42);
        let (snapshot, _, _) = synthetic_snapshot(&mut rng, 5, 40, 0.01, 0.01);
        let rig = stereo_rig();
        let config = SbaConfig {
            huber_delta: None,
            ..SbaConfig::default()
        };
        let result = sparse_bundle_adjustment(&snapshot, &rig, &config).unwrap();
        assert!(
            result.final_rmse_px < 1e-8,
            "final rmse {} px",
            result.final_rmse_px
        );
        assert!(result.final_rmse_px <= result.initial_rmse_px);
    }

    #[test]
    fn already_optimal_input_changes_nothing() {
        let mut rng = StdRng::seed_from_u64(43);
        let (snapshot, _, _) = synthetic_snapshot(&mut rng, 4, 30, 0.0, 0.0);
        let rig = stereo_rig();
        let config = SbaConfig {
            huber_delta: None,
            ..SbaConfig::default()
        };
        let result = sparse_bundle_adjustment(&snapshot, &rig, &config).unwrap();
        assert!(result.report.iterations <= 1);
        for (kf, (_, pose)) in snapshot.keyframes.iter().zip(result.poses.iter()) {
            assert!(kf.pose.max_abs_diff(pose) < 1e-12);
        }
        for (lm, (_, pos)) in snapshot.landmarks.iter().zip(result.landmarks.iter()) {
            assert!((lm.position - pos).norm() < 1e-12);
        }
    }

    #[test]
    fn schur_step_equals_dense_step() {
        let mut rng = StdRng::seed_from_u64(44);
        let (snapshot, _, _) = synthetic_snapshot(&mut rng, 4, 30, 0.02, 0.02);
        let rig = stereo_rig();

        let mut problem = Problem::new();
        let mut pose_keys = Vec::new();
        for kf in &snapshot.keyframes {
            pose_keys.push(problem.add_pose(kf.pose));
        }
        problem.set_fixed(pose_keys[0]);
        let mut point_keys = Vec::new();
        for lm in &snapshot.landmarks {
            point_keys.push(problem.add_point(lm.position));
        }
        for obs in &snapshot.observations {
            let cam = rig.camera(obs.camera);
            problem.add_factor(Box::new(ReprojectionFactor::new(
                pose_keys[obs.keyframe as usize],
                point_keys[obs.landmark as usize],
                cam.model,
                cam.extrinsic,
                obs.pixel,
                1.0,
                None,
            )));
        }

        for lambda in [1e-6, 1e-3, 1.0] {
            let dense = problem
                .normal_equation_step(lambda, LinearSolver::Dense)
                .unwrap();
            let schur = problem
                .normal_equation_step(lambda, LinearSolver::SchurPoints)
                .unwrap();
            let diff = (&dense - &schur).abs().max();
            assert!(diff < 1e-8, "lambda {lambda}: step difference {diff}");
        }
    }
}
