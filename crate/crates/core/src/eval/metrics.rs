//! Trajectory metrics: absolute pose error with closed-form alignment and
//! the relative-error family (whole-trajectory, distance segments,
//! fixed-interval, per-frame).

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::pipeline::TrajectoryEstimate;

/// Association window between ground-truth and estimate timestamps.
pub const ASSOCIATION_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} associated pose pairs, found {got}")]
    TooFewAssociations { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    None,
    Rigid,
    RigidScale,
}

impl AlignMode {
    pub fn label(&self) -> &'static str {
        match self {
            AlignMode::None => "none",
            AlignMode::Rigid => "rigid",
            AlignMode::RigidScale => "rigid+scale",
        }
    }
}

/// Nearest-timestamp association within the tolerance; each index is used
/// at most once and pairs are greedily matched by time gap.
pub fn associate(
    a: &TrajectoryEstimate,
    b: &TrajectoryEstimate,
    tolerance: f64,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut j0 = 0usize;
    for (i, ea) in a.entries().iter().enumerate() {
        while j0 + 1 < b.len() && b.entries()[j0 + 1].timestamp <= ea.timestamp {
            j0 += 1;
        }
        for j in j0.saturating_sub(1)..(j0 + 3).min(b.len()) {
            let dt = (b.entries()[j].timestamp - ea.timestamp).abs();
            if dt <= tolerance {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Closed-form least-squares similarity/rigid alignment mapping `src` onto
/// `dst`: returns `(scale, rotation, translation)`.
pub fn umeyama_alignment(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let mean_src: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mean_dst: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst.iter()) {
        let cs = s - mean_src;
        cov += (d - mean_dst) * cs.transpose();
        var_src += cs.norm_squared();
    }
    cov /= n;
    var_src /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd");
    let v_t = svd.v_t.expect("svd");
    let mut s_fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s_fix[(2, 2)] = -1.0;
    }
    let rotation = u * s_fix * v_t;
    let scale = if with_scale && var_src > 1e-18 {
        let d = Matrix3::from_diagonal(&svd.singular_values);
        (d * s_fix).trace() / var_src
    } else {
        1.0
    };
    let translation = mean_dst - scale * (rotation * mean_src);
    (scale, rotation, translation)
}

#[derive(Debug, Clone, Serialize)]
pub struct ApeResult {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub pairs: usize,
    pub alignment: String,
    pub scale: f64,
}

/// RMSE absolute pose error of the translational residuals after the
/// requested alignment of the estimate onto the ground truth.
pub fn compute_ape(
    gt: &TrajectoryEstimate,
    est: &TrajectoryEstimate,
    align: AlignMode,
) -> Result<ApeResult, EvalError> {
    let pairs = associate(gt, est, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewAssociations {
            needed: 2,
            got: pairs.len(),
        });
    }
    let gt_pts: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(i, _)| *gt.entries()[*i].world_pose().translation())
        .collect();
    let est_pts: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(_, j)| *est.entries()[*j].world_pose().translation())
        .collect();

    let (scale, rot, trans) = match align {
        AlignMode::None => (1.0, Matrix3::identity(), Vector3::zeros()),
        AlignMode::Rigid => umeyama_alignment(&est_pts, &gt_pts, false),
        AlignMode::RigidScale => umeyama_alignment(&est_pts, &gt_pts, true),
    };

    let mut errors: Vec<f64> = est_pts
        .iter()
        .zip(gt_pts.iter())
        .map(|(e, g)| (g - (scale * (rot * e) + trans)).norm())
        .collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ApeResult {
        rmse,
        mean,
        median: errors[errors.len() / 2],
        max: *errors.last().expect("non-empty"),
        pairs: pairs.len(),
        alignment: align.label().to_string(),
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelativeScheme {
    /// Consecutive-pair errors over the whole trajectory: translation as a
    /// percentage of distance traveled, rotation as mean degrees per pair.
    Whole,
    /// Distance segments of 100..800 m: translation percent of segment
    /// length, rotation in degrees per meter.
    KittiSegments,
    /// Pairs one second apart: RMSE translation (m) and rotation (deg).
    FixedDelta(f64),
    /// Consecutive pairs: mean translation (m) and rotation (deg) per frame.
    PerFrame,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsReport {
    pub scheme: String,
    pub avg_rte_percent: Option<f64>,
    pub avg_re_deg: Option<f64>,
    pub rmse_ape_m: Option<f64>,
    pub segment_translation_percent: Option<f64>,
    pub segment_rotation_deg_per_m: Option<f64>,
    pub rpe_delta_m: Option<f64>,
    pub rpe_delta_deg: Option<f64>,
    pub t_rel_m_per_frame: Option<f64>,
    pub r_rel_deg_per_frame: Option<f64>,
    pub pairs: usize,
    pub skipped_segments: usize,
}

fn relative_error(
    gt_i: &RigidTransform,
    gt_j: &RigidTransform,
    est_i: &RigidTransform,
    est_j: &RigidTransform,
) -> (f64, f64) {
    // E = (gt_i^-1 gt_j)^-1 (est_i^-1 est_j) on world poses.
    let gt_rel = gt_i.inverse().compose(gt_j);
    let est_rel = est_i.inverse().compose(est_j);
    let e = gt_rel.inverse().compose(&est_rel);
    (e.translation().norm(), e.rotation_angle().to_degrees())
}

/// Relative pose errors between associated trajectories under the given
/// scheme. Segments that do not fit into the trajectory are skipped and
/// counted.
pub fn compute_relative_errors(
    gt: &TrajectoryEstimate,
    est: &TrajectoryEstimate,
    scheme: RelativeScheme,
) -> Result<MetricsReport, EvalError> {
    let pairs = associate(gt, est, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewAssociations {
            needed: 2,
            got: pairs.len(),
        });
    }
    let gt_poses: Vec<RigidTransform> = pairs
        .iter()
        .map(|(i, _)| gt.entries()[*i].world_pose())
        .collect();
    let est_poses: Vec<RigidTransform> = pairs
        .iter()
        .map(|(_, j)| est.entries()[*j].world_pose())
        .collect();
    let times: Vec<f64> = pairs
        .iter()
        .map(|(i, _)| gt.entries()[*i].timestamp)
        .collect();

    // Cumulative ground-truth path length.
    let mut cumdist = vec![0.0f64];
    for w in gt_poses.windows(2) {
        let step = (w[1].translation() - w[0].translation()).norm();
        cumdist.push(cumdist.last().unwrap() + step);
    }

    let mut report = MetricsReport {
        pairs: pairs.len(),
        ..MetricsReport::default()
    };

    match scheme {
        RelativeScheme::Whole => {
            report.scheme = "whole".into();
            let mut t_sum = 0.0;
            let mut r_sum = 0.0;
            let n = gt_poses.len() - 1;
            for k in 0..n {
                let (t, r) =
                    relative_error(&gt_poses[k], &gt_poses[k + 1], &est_poses[k], &est_poses[k + 1]);
                t_sum += t;
                r_sum += r;
            }
            let path = *cumdist.last().unwrap();
            report.avg_rte_percent = Some(if path > 1e-12 {
                100.0 * t_sum / path
            } else {
                0.0
            });
            report.avg_re_deg = Some(r_sum / n as f64);
        }
        RelativeScheme::KittiSegments => {
            report.scheme = "kitti".into();
            let lengths = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
            let mut t_acc = 0.0;
            let mut r_acc = 0.0;
            let mut count = 0usize;
            let mut skipped = 0usize;
            for (k, _) in gt_poses.iter().enumerate() {
                for len in lengths {
                    let target = cumdist[k] + len;
                    let Some(j) = cumdist.iter().position(|d| *d >= target) else {
                        skipped += 1;
                        continue;
                    };
                    let seg_len = cumdist[j] - cumdist[k];
                    if seg_len < 1e-9 {
                        skipped += 1;
                        continue;
                    }
                    let (t, r) =
                        relative_error(&gt_poses[k], &gt_poses[j], &est_poses[k], &est_poses[j]);
                    t_acc += 100.0 * t / seg_len;
                    r_acc += r / seg_len;
                    count += 1;
                }
            }
            report.skipped_segments = skipped;
            if count > 0 {
                report.segment_translation_percent = Some(t_acc / count as f64);
                report.segment_rotation_deg_per_m = Some(r_acc / count as f64);
                report.avg_rte_percent = report.segment_translation_percent;
                report.avg_re_deg = Some(r_acc / count as f64);
            }
        }
        RelativeScheme::FixedDelta(delta) => {
            report.scheme = format!("rpe@{delta}s");
            let mut t_sq = 0.0;
            let mut r_sq = 0.0;
            let mut count = 0usize;
            let mut skipped = 0usize;
            for k in 0..times.len() {
                let target = times[k] + delta;
                let j = times
                    .iter()
                    .enumerate()
                    .skip(k + 1)
                    .find(|(_, t)| (**t - target).abs() <= ASSOCIATION_TOLERANCE)
                    .map(|(j, _)| j);
                let Some(j) = j else {
                    skipped += 1;
                    continue;
                };
                let (t, r) =
                    relative_error(&gt_poses[k], &gt_poses[j], &est_poses[k], &est_poses[j]);
                t_sq += t * t;
                r_sq += r * r;
                count += 1;
            }
            report.skipped_segments = skipped;
            if count > 0 {
                report.rpe_delta_m = Some((t_sq / count as f64).sqrt());
                report.rpe_delta_deg = Some((r_sq / count as f64).sqrt());
            }
        }
        RelativeScheme::PerFrame => {
            report.scheme = "frame".into();
            let n = gt_poses.len() - 1;
            let mut t_sum = 0.0;
            let mut r_sum = 0.0;
            for k in 0..n {
                let (t, r) =
                    relative_error(&gt_poses[k], &gt_poses[k + 1], &est_poses[k], &est_poses[k + 1]);
                t_sum += t;
                r_sum += r;
            }
            report.t_rel_m_per_frame = Some(t_sum / n as f64);
            report.r_rel_deg_per_frame = Some(r_sum / n as f64);
        }
    }
    Ok(report)
}
