//! Multi-camera perspective-n-point pose estimation.
//!
//! Minimizes the Huber-weighted reprojection error of known landmarks over
//! a single base pose. With one camera this is plain PnP; with several, the
//! same objective simply sums observations across the rig.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::geometry::{CameraRig, RigidTransform};

use super::factors::FixedPointReprojection;
use super::problem::{LinearSolver, LmReport, LmSettings, Problem, Termination};
use super::SolverError;

/// 95% chi-square gate for a 2-DoF whitened residual.
pub const CHI2_2DOF_95: f64 = 5.991;

#[derive(Debug, Clone, Copy)]
pub struct PnpObservation {
    /// Landmark position in the world frame.
    pub point: Vector3<f64>,
    /// Rig camera index that saw it.
    pub camera: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct PnpConfig {
    pub pixel_sigma: f64,
    /// Huber threshold in whitened units; None disables the robust loss.
    pub huber_delta: Option<f64>,
    pub lm: LmSettings,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            huber_delta: Some(1.345),
            lm: LmSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PnpResult {
    /// Base-from-world transform.
    pub pose: RigidTransform,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// RMS reprojection norm over inliers, pixels.
    pub inlier_rmse_px: f64,
    pub report: LmReport,
}

fn collinear(points: &[Vector3<f64>]) -> bool {
    let n = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigenvalues();
    let mut vals: Vec<f64> = eig.iter().copied().collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // Rank < 2 means all points lie on one line (or coincide).
    vals[1] <= 1e-10 * vals[0].max(1e-12)
}

/// Estimates the base-from-world pose from landmark observations across the
/// rig, starting from `init`.
pub fn solve_pnp(
    observations: &[PnpObservation],
    rig: &CameraRig,
    init: &RigidTransform,
    config: &PnpConfig,
) -> Result<PnpResult, SolverError> {
    if observations.len() < 3 {
        return Err(SolverError::InsufficientConstraints {
            needed: 3,
            got: observations.len(),
        });
    }
    let points: Vec<Vector3<f64>> = observations.iter().map(|o| o.point).collect();
    if collinear(&points) {
        return Err(SolverError::InsufficientConstraints {
            needed: 3,
            got: observations.len(),
        });
    }

    let mut problem = Problem::new();
    let pose_key = problem.add_pose(*init);
    let mut factors = Vec::with_capacity(observations.len());
    for obs in observations {
        let cam = rig.camera(obs.camera);
        let f = FixedPointReprojection::new(
            pose_key,
            obs.point,
            cam.model,
            cam.extrinsic,
            obs.pixel,
            config.pixel_sigma,
            config.huber_delta,
        );
        factors.push(f.clone());
        problem.add_factor(Box::new(f));
    }

    let report = problem
        .solve(&config.lm, LinearSolver::Dense)
        .map_err(|_| SolverError::NoConvergence)?;
    if report.termination == Termination::LambdaExhausted && report.accepted_steps == 0 {
        return Err(SolverError::NoConvergence);
    }

    let pose = *problem.var(pose_key).as_pose();
    let mut inliers = Vec::with_capacity(observations.len());
    let mut inlier_count = 0;
    let mut sq_sum = 0.0;
    for f in &factors {
        let r = f.residual_at(&pose);
        let ok = r.norm_squared() < CHI2_2DOF_95;
        if ok {
            inlier_count += 1;
            sq_sum += r.norm_squared() * config.pixel_sigma * config.pixel_sigma;
        }
        inliers.push(ok);
    }
    let inlier_rmse_px = if inlier_count > 0 {
        (sq_sum / inlier_count as f64).sqrt()
    } else {
        f64::INFINITY
    };

    Ok(PnpResult {
        pose,
        inliers,
        inlier_count,
        inlier_rmse_px,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, CameraModel, RigCamera, Twist};
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

    fn scene(rng: &mut StdRng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(2.0..8.0),
                )
            })
            .collect()
    }

    fn observe(
        points: &[Vector3<f64>],
        rig: &CameraRig,
        pose: &RigidTransform,
    ) -> Vec<PnpObservation> {
        let mut out = Vec::new();
        for p in points {
            for (k, cam) in rig.cameras().iter().enumerate() {
                let pc = cam.extrinsic.transform_point(&pose.transform_point(p));
                if let Ok(px) = cam.model.project(&pc) {
                    out.push(PnpObservation {
                        point: *p,
                        camera: k,
                        pixel: px,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn recovers_pose_from_noise_free_landmarks() {
        let mut rng = StdRng::seed_from_u64(31);
        let rig = stereo_rig();
        let truth = se3_exp(&Twist::new(
            Vector3::new(0.02, -0.03, 0.05),
            Vector3::new(0.2, -0.1, 0.3),
        ));
        let points = scene(&mut rng, 20);
        let observations = observe(&points, &rig, &truth);
        let init = se3_exp(&Twist::new(
            Vector3::new(0.05, 0.0, 0.0),
            Vector3::new(0.1, 0.0, 0.0),
        ))
        .compose(&truth);
        let result = solve_pnp(&observations, &rig, &init, &PnpConfig::default()).unwrap();
        assert!(
            result.pose.max_abs_diff(&truth) < 1e-8,
            "pose error {}",
            result.pose.max_abs_diff(&truth)
        );
        assert_eq!(result.inlier_count, observations.len());
    }

    #[test]
    fn collinear_landmarks_are_rejected() {
        let rig = stereo_rig();
        let points: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 3.0))
            .collect();
        let observations = observe(&points, &rig, &RigidTransform::identity());
        let err = solve_pnp(
            &observations,
            &rig,
            &RigidTransform::identity(),
            &PnpConfig::default(),
        );
        assert!(matches!(
            err,
            Err(SolverError::InsufficientConstraints { .. })
        ));
    }

    #[test]
    fn mono_subset_matches_full_stereo_objective_shape() {
        // With the same factors supplied, solving camera 0 only and solving
        // both cameras from the same start agree at the optimum (noise-free).
        let mut rng = StdRng::seed_from_u64(5);
        let rig = stereo_rig();
        let truth = se3_exp(&Twist::new(
            Vector3::new(-0.01, 0.02, 0.01),
            Vector3::new(0.1, 0.05, -0.1),
        ));
        let points = scene(&mut rng, 15);
        let all = observe(&points, &rig, &truth);
        let mono: Vec<PnpObservation> = all.iter().filter(|o| o.camera == 0).copied().collect();
        let init = RigidTransform::identity();
        let full = solve_pnp(&all, &rig, &init, &PnpConfig::default()).unwrap();
        let left = solve_pnp(&mono, &rig, &init, &PnpConfig::default()).unwrap();
        assert!(full.pose.max_abs_diff(&truth) < 1e-8);
        assert!(left.pose.max_abs_diff(&truth) < 1e-7);
    }
}
