//! Coarse-to-fine dense frame-to-frame pose estimation.
//!
//! Combines the symmetric dense intensity/depth terms, the point-to-point
//! matches from the 2D tracker, and optional reprojection factors against
//! the local map into one Levenberg-Marquardt objective over the relative
//! transform. The solve starts at the coarsest pyramid level and seeds each
//! finer level with the previous solution.

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::frontend2d::{GrayImage, ImagePyramid};
use crate::geometry::{se3_exp, skew, CameraModel, RigidTransform, Twist, DEPTH_EPSILON};

use super::depth::{halved_camera, DepthImage};
use super::residuals::{
    dense_residuals, point_to_point_residuals, select_dense_pixels, DensePixelSet,
    PixelSelectConfig,
};

/// One RGB-D frame with per-level intensity and depth planes.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub intensity: ImagePyramid,
    pub depth: Vec<DepthImage>,
}

impl RgbdFrame {
    pub fn build(intensity: GrayImage, depth: DepthImage, levels: usize) -> Result<Self, crate::frontend2d::ImageError> {
        assert_eq!(intensity.width(), depth.width());
        assert_eq!(intensity.height(), depth.height());
        let pyramid = ImagePyramid::build(intensity, levels)?;
        let mut depths = vec![depth];
        for _ in 1..levels {
            let next = depths.last().expect("non-empty").downsample();
            depths.push(next);
        }
        Ok(Self {
            intensity: pyramid,
            depth: depths,
        })
    }

    pub fn levels(&self) -> usize {
        self.depth.len()
    }
}

/// Reprojection factor against the local map, expressed in frame-1 camera
/// coordinates (the frame-1 pose is folded into the landmark position).
#[derive(Debug, Clone, Copy)]
pub struct MapFactor {
    /// Landmark in frame-1 camera coordinates.
    pub point_frame1: Vector3<f64>,
    /// Observation in frame 2, pixels at full resolution.
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct RgbdConfig {
    pub intensity_sigma: f64,
    /// sigma_z = coeff * z^2.
    pub depth_sigma_coeff: f64,
    pub p2p_sigma: f64,
    pub reproj_sigma_px: f64,
    pub pixel_select: PixelSelectConfig,
    pub max_iterations_per_level: usize,
    pub initial_lambda: f64,
    pub step_tolerance: f64,
}

impl Default for RgbdConfig {
    fn default() -> Self {
        Self {
            intensity_sigma: 1e-2,
            depth_sigma_coeff: 0.01,
            p2p_sigma: 1e-2,
            reproj_sigma_px: 1.0,
            pixel_select: PixelSelectConfig::default(),
            max_iterations_per_level: 10,
            initial_lambda: 1e-4,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Error)]
pub enum RgbdError {
    #[error("no valid residuals: dense terms, matches, and map factors are all empty")]
    InsufficientData,
    #[error("dense alignment did not accept any step")]
    NoConvergence,
    #[error("frames have different pyramid depths")]
    LevelMismatch,
}

#[derive(Debug, Clone)]
pub struct RgbdResult {
    /// Frame-1-camera to frame-2-camera transform.
    pub transform: RigidTransform,
    pub final_cost: f64,
    pub initial_cost: f64,
    pub residual_count: usize,
}

struct Accum {
    h: Matrix6<f64>,
    g: Vector6<f64>,
    cost: f64,
    rows: usize,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    f1: &RgbdFrame,
    f2: &RgbdFrame,
    cam: &CameraModel,
    level: usize,
    pixels1: &DensePixelSet,
    pixels2: &DensePixelSet,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    map_factors: &[MapFactor],
    t: &RigidTransform,
    config: &RgbdConfig,
    with_normals: bool,
) -> Accum {
    let mut acc = Accum {
        h: Matrix6::zeros(),
        g: Vector6::zeros(),
        cost: 0.0,
        rows: 0,
    };
    let (int_rows, depth_rows) = dense_residuals(
        f1.intensity.level(level),
        &f1.depth[level],
        f2.intensity.level(level),
        &f2.depth[level],
        cam,
        t,
        pixels1,
        pixels2,
        config.intensity_sigma,
        config.depth_sigma_coeff,
    );
    for row in int_rows.iter().chain(depth_rows.iter()) {
        acc.cost += row.value * row.value;
        acc.rows += 1;
        if with_normals {
            acc.h += row.jacobian.transpose() * row.jacobian;
            acc.g += row.jacobian.transpose() * row.value;
        }
    }

    let scale = (1u32 << level) as f64;
    let scaled: Vec<(Vector2<f64>, Vector2<f64>)> = matches
        .iter()
        .map(|(a, b)| (a / scale, b / scale))
        .collect();
    for row in point_to_point_residuals(
        &scaled,
        &f1.depth[level],
        &f2.depth[level],
        cam,
        t,
        config.p2p_sigma,
    ) {
        acc.cost += row.value.norm_squared();
        acc.rows += 3;
        if with_normals {
            let mut jac = nalgebra::Matrix3x6::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&row.jac_w);
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&row.jac_v);
            acc.h += jac.transpose() * jac;
            acc.g += jac.transpose() * row.value;
        }
    }

    // Map reprojection runs at full resolution only.
    if level == 0 {
        let iw = 1.0 / config.reproj_sigma_px;
        for f in map_factors {
            let q = t.transform_point(&f.point_frame1);
            if q.z <= DEPTH_EPSILON {
                continue;
            }
            let Ok(px) = cam.project(&q) else { continue };
            let r = (px - f.pixel) * iw;
            acc.cost += r.norm_squared();
            acc.rows += 2;
            if with_normals {
                let jproj = cam.project_jacobian(&q) * iw;
                let jw = jproj * (-skew(&q));
                let jv = jproj;
                let mut jac = nalgebra::Matrix2x6::zeros();
                jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
                jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&jv);
                acc.h += jac.transpose() * jac;
                acc.g += jac.transpose() * r;
            }
        }
    }
    acc
}

/// Estimates the relative transform taking frame-1 camera points into the
/// frame-2 camera.
pub fn solve_rgbd(
    f1: &RgbdFrame,
    f2: &RgbdFrame,
    cam0: &CameraModel,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    map_factors: &[MapFactor],
    init: &RigidTransform,
    config: &RgbdConfig,
) -> Result<RgbdResult, RgbdError> {
    if f1.levels() != f2.levels() {
        return Err(RgbdError::LevelMismatch);
    }
    let levels = f1.levels();
    let mut cams = vec![*cam0];
    for _ in 1..levels {
        cams.push(halved_camera(cams.last().expect("non-empty")));
    }

    let mut t = *init;
    let mut any_rows = false;
    let mut accepted_any = false;
    let mut final_cost = 0.0;
    let mut initial_cost = None;
    let mut residual_count = 0;

    for level in (0..levels).rev() {
        let pixels1 =
            select_dense_pixels(f1.intensity.level(level), &f1.depth[level], &config.pixel_select);
        let pixels2 =
            select_dense_pixels(f2.intensity.level(level), &f2.depth[level], &config.pixel_select);

        let mut lambda = config.initial_lambda;
        let mut current = evaluate(
            f1, f2, &cams[level], level, &pixels1, &pixels2, matches, map_factors, &t, config,
            true,
        );
        if level == 0 {
            initial_cost = Some(
                evaluate(
                    f1, f2, &cams[0], 0, &pixels1, &pixels2, matches, map_factors, init, config,
                    false,
                )
                .cost,
            );
        }
        if current.rows == 0 {
            continue;
        }
        any_rows = true;

        for _ in 0..config.max_iterations_per_level {
            let mut h = current.h;
            for d in 0..6 {
                h[(d, d)] += lambda;
            }
            let Some(step) = h.cholesky().map(|c| c.solve(&(-current.g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial_t = se3_exp(&Twist::new(
                Vector3::new(step[0], step[1], step[2]),
                Vector3::new(step[3], step[4], step[5]),
            ))
            .compose(&t);
            let trial = evaluate(
                f1, f2, &cams[level], level, &pixels1, &pixels2, matches, map_factors, &trial_t,
                config, true,
            );
            if trial.rows > 0 && trial.cost.is_finite() && trial.cost <= current.cost {
                t = trial_t;
                current = trial;
                accepted_any = true;
                lambda = (lambda * 0.5).max(1e-12);
                if step.norm() < config.step_tolerance {
                    break;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
        if level == 0 {
            final_cost = current.cost;
            residual_count = current.rows;
        }
    }

    if !any_rows {
        return Err(RgbdError::InsufficientData);
    }
    let initial_cost = initial_cost.unwrap_or(f64::INFINITY);
    if final_cost > initial_cost {
        // The coarse levels led the fine level astray; redo the finest
        // level from the caller's initialization.
        let pixels1 = select_dense_pixels(f1.intensity.level(0), &f1.depth[0], &config.pixel_select);
        let pixels2 = select_dense_pixels(f2.intensity.level(0), &f2.depth[0], &config.pixel_select);
        let mut lambda = config.initial_lambda;
        t = *init;
        let mut current = evaluate(
            f1, f2, &cams[0], 0, &pixels1, &pixels2, matches, map_factors, &t, config, true,
        );
        for _ in 0..config.max_iterations_per_level {
            let mut h = current.h;
            for d in 0..6 {
                h[(d, d)] += lambda;
            }
            let Some(step) = h.cholesky().map(|c| c.solve(&(-current.g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial_t = se3_exp(&Twist::new(
                Vector3::new(step[0], step[1], step[2]),
                Vector3::new(step[3], step[4], step[5]),
            ))
            .compose(&t);
            let trial = evaluate(
                f1, f2, &cams[0], 0, &pixels1, &pixels2, matches, map_factors, &trial_t, config,
                true,
            );
            if trial.rows > 0 && trial.cost.is_finite() && trial.cost <= current.cost {
                t = trial_t;
                current = trial;
                lambda = (lambda * 0.5).max(1e-12);
                if step.norm() < config.step_tolerance {
                    break;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
        final_cost = current.cost;
        residual_count = current.rows;
    }
    if !accepted_any && final_cost > 1e-18 && final_cost >= initial_cost {
        return Err(RgbdError::NoConvergence);
    }

    Ok(RgbdResult {
        transform: t,
        final_cost,
        initial_cost,
        residual_count,
    })
}
