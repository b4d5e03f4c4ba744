//! Two-view bootstrap: fundamental-matrix RANSAC and pose recovery.
//!
//! Matches are pixel pairs `(x in view 1, y in view 2)` satisfying
//! `y^T F x = 0` in homogeneous pixel coordinates. The recovered pose maps
//! view-1 camera coordinates into view 2 and carries a unit-norm
//! translation; monocular scale is fixed downstream.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{CameraModel, RigidTransform};

use super::SolverError;

#[derive(Debug, Clone)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Sampson gate in pixels.
    pub threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            threshold_px: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FundamentalResult {
    /// Rank-2 fundamental matrix, Frobenius-normalized.
    pub f: Matrix3<f64>,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
}

fn homogeneous(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

/// Similarity normalization: centroid to origin, mean distance sqrt(2).
fn normalization(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 {
        (2.0f64).sqrt() / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0)
}

/// Normalized eight-point solve on the given subset. Returns a rank-2 F in
/// pixel coordinates.
fn eight_point(matches: &[(Vector2<f64>, Vector2<f64>)], subset: &[usize]) -> Option<Matrix3<f64>> {
    let xs: Vec<Vector2<f64>> = subset.iter().map(|i| matches[*i].0).collect();
    let ys: Vec<Vector2<f64>> = subset.iter().map(|i| matches[*i].1).collect();
    let t1 = normalization(&xs);
    let t2 = normalization(&ys);

    let mut a = DMatrix::zeros(subset.len(), 9);
    for (row, i) in subset.iter().enumerate() {
        let x = t1 * homogeneous(&matches[*i].0);
        let y = t2 * homogeneous(&matches[*i].1);
        let coeffs = [
            y.x * x.x,
            y.x * x.y,
            y.x,
            y.y * x.x,
            y.y * x.y,
            y.y,
            x.x,
            x.y,
            1.0,
        ];
        for (c, v) in coeffs.iter().enumerate() {
            a[(row, c)] = *v;
        }
    }
    // Null vector of A via the smallest eigenpair of A^T A (A can have
    // fewer rows than columns, where a thin SVD has no null space).
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let fvec = eig.eigenvectors.column(min_idx);
    let f_norm = Matrix3::new(
        fvec[0], fvec[1], fvec[2], fvec[3], fvec[4], fvec[5], fvec[6], fvec[7], fvec[8],
    );

    // Enforce rank 2.
    let svd3 = f_norm.svd(true, true);
    let u = svd3.u?;
    let v_t3 = svd3.v_t?;
    let mut s = svd3.singular_values;
    s[2] = 0.0;
    let f_rank2 = u * Matrix3::from_diagonal(&s) * v_t3;

    let f = t2.transpose() * f_rank2 * t1;
    let norm = f.norm();
    (norm > 1e-15).then(|| f / norm)
}

/// First-order (Sampson) squared distance to the epipolar constraint, px^2.
pub fn sampson_distance(f: &Matrix3<f64>, x: &Vector2<f64>, y: &Vector2<f64>) -> f64 {
    let xh = homogeneous(x);
    let yh = homogeneous(y);
    let fx = f * xh;
    let fty = f.transpose() * yh;
    let num = yh.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + fty.x * fty.x + fty.y * fty.y;
    if den < 1e-18 {
        f64::INFINITY
    } else {
        num * num / den
    }
}

fn classify(
    f: &Matrix3<f64>,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    threshold_px: f64,
) -> (Vec<bool>, usize) {
    let gate = threshold_px * threshold_px;
    let mut mask = Vec::with_capacity(matches.len());
    let mut count = 0;
    for (x, y) in matches {
        let ok = sampson_distance(f, x, y) <= gate;
        if ok {
            count += 1;
        }
        mask.push(ok);
    }
    (mask, count)
}

/// RANSAC-robust fundamental-matrix estimation with a final re-fit on the
/// inlier set. Deterministic for a fixed seed.
pub fn estimate_fundamental_ransac(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    config: &RansacConfig,
) -> Result<FundamentalResult, SolverError> {
    if matches.len() < 8 {
        return Err(SolverError::BootstrapFailure {
            reason: "fewer than 8 matches",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Matrix3<f64>, usize)> = None;
    for _ in 0..config.iterations {
        let subset = rand::seq::index::sample(&mut rng, matches.len(), 8).into_vec();
        let Some(f) = eight_point(matches, &subset) else {
            continue;
        };
        let (_, count) = classify(&f, matches, config.threshold_px);
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((f, count));
        }
    }
    let Some((f_best, count)) = best else {
        return Err(SolverError::BootstrapFailure {
            reason: "no fundamental-matrix model found",
        });
    };
    if count < 8 {
        return Err(SolverError::BootstrapFailure {
            reason: "no model with 8 inliers",
        });
    }

    // Re-fit on all inliers of the best model, then reclassify.
    let (mask, _) = classify(&f_best, matches, config.threshold_px);
    let inlier_idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, ok)| ok.then_some(i))
        .collect();
    let f = eight_point(matches, &inlier_idx).unwrap_or(f_best);
    let (inliers, inlier_count) = classify(&f, matches, config.threshold_px);
    if inlier_count < 8 {
        return Err(SolverError::BootstrapFailure {
            reason: "refit lost inliers",
        });
    }
    Ok(FundamentalResult {
        f,
        inliers,
        inlier_count,
    })
}

/// Linear two-view triangulation in normalized camera coordinates.
/// `pose` maps view-1 coordinates into view 2. Returns the view-1 point.
fn triangulate_normalized(
    pose: &RigidTransform,
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
) -> Option<Vector3<f64>> {
    let r = pose.rotation_matrix();
    let t = pose.translation();
    let mut a = DMatrix::zeros(4, 4);
    // View 1: projection [I | 0].
    a[(0, 0)] = -1.0;
    a[(0, 2)] = x1.x;
    a[(1, 1)] = -1.0;
    a[(1, 2)] = x1.y;
    // View 2: projection [R | t].
    for c in 0..3 {
        a[(2, c)] = x2.x * r[(2, c)] - r[(0, c)];
        a[(3, c)] = x2.y * r[(2, c)] - r[(1, c)];
    }
    a[(2, 3)] = x2.x * t.z - t.x;
    a[(3, 3)] = x2.y * t.z - t.y;

    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let h = v_t.row(3);
    (h[3].abs() > 1e-12).then(|| Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Recovers the up-to-scale relative pose (view-2-from-view-1, unit
/// translation) from a rank-2 fundamental matrix via the essential matrix
/// and a cheirality vote over the inlier matches.
pub fn pose_from_fundamental(
    f: &Matrix3<f64>,
    model: &CameraModel,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    inliers: Option<&[bool]>,
) -> Result<RigidTransform, SolverError> {
    let k = Matrix3::new(
        model.fx, 0.0, model.cx, 0.0, model.fy, model.cy, 0.0, 0.0, 1.0,
    );
    let e = k.transpose() * f * k;
    let svd = e.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(SolverError::BootstrapFailure {
            reason: "essential-matrix decomposition failed",
        });
    };
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let fix = |m: Matrix3<f64>| if m.determinant() < 0.0 { -m } else { m };
    let r1 = fix(u * w * v_t);
    let r2 = fix(u * w.transpose() * v_t);
    let t = Vector3::new(u[(0, 2)], u[(1, 2)], u[(2, 2)]).normalize();

    let selected: Vec<&(Vector2<f64>, Vector2<f64>)> = match inliers {
        Some(mask) => matches
            .iter()
            .zip(mask.iter())
            .filter_map(|(m, ok)| ok.then_some(m))
            .collect(),
        None => matches.iter().collect(),
    };
    if selected.is_empty() {
        return Err(SolverError::BootstrapFailure {
            reason: "no matches for cheirality vote",
        });
    }

    let kinv = |p: &Vector2<f64>| {
        Vector2::new((p.x - model.cx) / model.fx, (p.y - model.cy) / model.fy)
    };

    let mut candidates = Vec::new();
    for r in [r1, r2] {
        for sign in [1.0, -1.0] {
            candidates.push(RigidTransform::from_rotation_matrix(&r, sign * t));
        }
    }
    let mut votes = [0usize; 4];
    let mut parallax: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for (ci, cand) in candidates.iter().enumerate() {
        let center2 = cand.inverse().transform_point(&Vector3::zeros());
        for (x, y) in &selected {
            let xn = kinv(x);
            let yn = kinv(y);
            let Some(p1) = triangulate_normalized(cand, &xn, &yn) else {
                continue;
            };
            let p2 = cand.transform_point(&p1);
            if p1.z > 0.0 && p2.z > 0.0 {
                votes[ci] += 1;
                let d1 = p1.normalize();
                let d2 = (p1 - center2).normalize();
                parallax[ci].push(d1.dot(&d2).clamp(-1.0, 1.0).acos());
            }
        }
    }

    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|a, b| votes[*b].cmp(&votes[*a]));
    let best = order[0];
    let second = order[1];
    let n = selected.len();
    if votes[best] < (3 * n).div_ceil(4) || votes[second] * 4 > n {
        return Err(SolverError::BootstrapFailure {
            reason: "ambiguous cheirality vote",
        });
    }
    let mut angles = parallax[best].clone();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_parallax = angles[angles.len() / 2];
    if median_parallax < 0.25 * std::f64::consts::PI / 180.0 {
        return Err(SolverError::BootstrapFailure {
            reason: "insufficient parallax",
        });
    }

    Ok(candidates[best])
}
