//! Coarse-to-fine Lucas-Kanade tracking with an NCC reliability gate.
//!
//! Each live feature is refined from the top pyramid level down. Per level
//! the translational LK update iterates until the step drops below the
//! convergence threshold or the iteration cap is reached; the solution then
//! seeds the next finer level. A normalized cross-correlation check between
//! the source and destination patches runs after every level and kills
//! unreliable tracks.

use nalgebra::{Matrix2, Vector2};

use super::image::{GrayImage, ImagePyramid};
use super::track::Track;

#[derive(Debug, Clone, Copy)]
pub struct LkParams {
    /// Patch half-width; the window is (2h+1) x (2h+1).
    pub half_window: usize,
    pub max_iterations: usize,
    /// Stop once the update step is below this many pixels.
    pub convergence_px: f64,
    /// Tracks with a patch correlation below this are lost.
    pub ncc_min: f64,
    /// Structure-tensor conditioning floor.
    pub min_eigenvalue: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            half_window: 5,
            max_iterations: 10,
            convergence_px: 0.01,
            ncc_min: 0.8,
            min_eigenvalue: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReason {
    OutOfBounds,
    LowTexture,
    NccRejected,
}

#[derive(Debug, Clone, Copy)]
pub enum LkOutcome {
    Converged { position: Vector2<f64>, ncc: f64 },
    Lost(LossReason),
}

/// Zero-mean normalized cross-correlation of two equal-length patches.
/// A patch correlates with itself at +1 and with its negation at -1;
/// zero-variance patches return 0.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let da = x - mean_a;
        let db = y - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    let denom = (var_a * var_b).sqrt();
    if denom < 1e-12 {
        0.0
    } else {
        cov / denom
    }
}

fn sample_patch(
    image: &GrayImage,
    center: Vector2<f64>,
    half: usize,
    out: &mut Vec<f64>,
) -> bool {
    let margin = half as f64 + 1.0;
    if !image.in_bounds(center.x, center.y, margin) {
        return false;
    }
    out.clear();
    let h = half as i64;
    for dy in -h..=h {
        for dx in -h..=h {
            out.push(image.sample(center.x + dx as f64, center.y + dy as f64));
        }
    }
    true
}

/// Tracks one feature from `prev` into `curr`. `seed` optionally overrides
/// the start position in the destination image (cross-camera prior).
pub fn track_feature(
    prev: &ImagePyramid,
    curr: &ImagePyramid,
    position: Vector2<f64>,
    seed: Option<Vector2<f64>>,
    params: &LkParams,
) -> LkOutcome {
    assert_eq!(
        prev.num_levels(),
        curr.num_levels(),
        "pyramids must have equal level counts"
    );
    let levels = prev.num_levels();
    let top_scale = (1u64 << (levels - 1)) as f64;
    // Displacement guess, accumulated across levels in level coordinates.
    let mut g = seed.map(|s| (s - position) / top_scale).unwrap_or_default();

    let mut src_patch = Vec::new();
    let mut dst_patch = Vec::new();
    let mut ncc_score = 0.0;
    let mut nu = Vector2::zeros();
    let h = params.half_window as i64;

    for level_idx in (0..levels).rev() {
        let scale = (1u64 << level_idx) as f64;
        let src = prev.level(level_idx);
        let dst = curr.level(level_idx);
        let u = position / scale;

        if !sample_patch(src, u, params.half_window, &mut src_patch) {
            return LkOutcome::Lost(LossReason::OutOfBounds);
        }

        // Spatial gradients of the source patch.
        let mut gx = Vec::with_capacity(src_patch.len());
        let mut gy = Vec::with_capacity(src_patch.len());
        let mut tensor = Matrix2::zeros();
        for dy in -h..=h {
            for dx in -h..=h {
                let (dx_i, dy_i) = src.gradient(u.x + dx as f64, u.y + dy as f64);
                tensor[(0, 0)] += dx_i * dx_i;
                tensor[(0, 1)] += dx_i * dy_i;
                tensor[(1, 0)] += dx_i * dy_i;
                tensor[(1, 1)] += dy_i * dy_i;
                gx.push(dx_i);
                gy.push(dy_i);
            }
        }
        let eig = tensor.symmetric_eigenvalues();
        if eig.min() < params.min_eigenvalue {
            return LkOutcome::Lost(LossReason::LowTexture);
        }
        let inv = match tensor.try_inverse() {
            Some(inv) => inv,
            None => return LkOutcome::Lost(LossReason::LowTexture),
        };

        nu = Vector2::zeros();
        for _ in 0..params.max_iterations {
            let target = u + g + nu;
            if !sample_patch(dst, target, params.half_window, &mut dst_patch) {
                return LkOutcome::Lost(LossReason::OutOfBounds);
            }
            let mut b = Vector2::zeros();
            for i in 0..src_patch.len() {
                let di = src_patch[i] - dst_patch[i];
                b.x += di * gx[i];
                b.y += di * gy[i];
            }
            let eta = inv * b;
            nu += eta;
            if eta.norm() < params.convergence_px {
                break;
            }
        }

        let target = u + g + nu;
        if !sample_patch(dst, target, params.half_window, &mut dst_patch) {
            return LkOutcome::Lost(LossReason::OutOfBounds);
        }
        ncc_score = ncc(&src_patch, &dst_patch);
        if ncc_score < params.ncc_min {
            return LkOutcome::Lost(LossReason::NccRejected);
        }

        if level_idx > 0 {
            g = 2.0 * (g + nu);
        }
    }

    let final_pos = position + g + nu;
    if !curr
        .base()
        .in_bounds(final_pos.x, final_pos.y, params.half_window as f64)
    {
        return LkOutcome::Lost(LossReason::OutOfBounds);
    }
    LkOutcome::Converged {
        position: final_pos,
        ncc: ncc_score,
    }
}

/// Advances every live track from `prev` to `curr`, marking failures lost.
pub fn track_lk(
    prev: &ImagePyramid,
    curr: &ImagePyramid,
    tracks: &mut [Track],
    params: &LkParams,
) {
    for track in tracks.iter_mut().filter(|t| t.is_live()) {
        match track_feature(prev, curr, track.position(), None, params) {
            LkOutcome::Converged { position, .. } => track.advance(position),
            LkOutcome::Lost(_) => track.mark_lost(),
        }
    }
}

/// Seeds each source feature into the destination camera image, optionally
/// shifted by a disparity prior, and runs the same LK refinement. Returns
/// the per-track outcome in input order.
pub fn cross_camera_track(
    src: &ImagePyramid,
    dst: &ImagePyramid,
    positions: &[Vector2<f64>],
    epipolar_hint: Option<Vector2<f64>>,
    params: &LkParams,
) -> Vec<LkOutcome> {
    positions
        .iter()
        .map(|p| {
            let seed = epipolar_hint.map(|h| p + h);
            track_feature(src, dst, *p, seed, params)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend2d::image::build_pyramid;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Smooth, high-texture analytic pattern.
    fn texture(x: f64, y: f64) -> f32 {
        let v = 0.5
            + 0.18 * (0.37 * x + 0.11 * y).sin()
            + 0.15 * (0.23 * y - 0.07 * x).cos()
            + 0.12 * (0.13 * x * 0.9).sin() * (0.19 * y).cos();
        v.clamp(0.0, 1.0) as f32
    }

    fn render(w: usize, h: usize, shift: Vector2<f64>) -> GrayImage {
        let mut img = GrayImage::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, texture(x as f64 - shift.x, y as f64 - shift.y));
            }
        }
        img
    }

    #[test]
    fn identical_frames_keep_positions_exactly() {
        let img = render(128, 96, Vector2::zeros());
        let pyr = build_pyramid(img, 3).unwrap();
        let params = LkParams::default();
        for start in [
            Vector2::new(30.0, 30.0),
            Vector2::new(64.5, 47.25),
            Vector2::new(100.0, 60.0),
        ] {
            match track_feature(&pyr, &pyr, start, None, &params) {
                LkOutcome::Converged { position, ncc } => {
                    assert_eq!(position, start);
                    assert!(ncc > 0.999);
                }
                LkOutcome::Lost(r) => panic!("lost: {r:?}"),
            }
        }
    }

    #[test]
    fn recovers_subpixel_shift_within_a_tenth_pixel() {
        let shift = Vector2::new(3.2, -1.7);
        let a = render(160, 120, Vector2::zeros());
        let b = render(160, 120, shift);
        let pa = build_pyramid(a, 3).unwrap();
        let pb = build_pyramid(b, 3).unwrap();
        let params = LkParams::default();
        let mut tested = 0;
        for y in (20..100).step_by(13) {
            for x in (20..140).step_by(17) {
                let start = Vector2::new(x as f64, y as f64);
                if let LkOutcome::Converged { position, .. } =
                    track_feature(&pa, &pb, start, None, &params)
                {
                    let err = (position - start - shift).norm();
                    assert!(err < 0.1, "shift error {err} at {start:?}");
                    tested += 1;
                }
            }
        }
        assert!(tested > 20, "only {tested} features survived");
    }

    #[test]
    fn ncc_gate_rejects_decorrelated_frames() {
        let a = render(128, 96, Vector2::zeros());
        let mut rng = StdRng::seed_from_u64(123);
        let mut noise = GrayImage::filled(128, 96, 0.0);
        for y in 0..96 {
            for x in 0..128 {
                noise.set(x, y, rng.random_range(0.0..1.0));
            }
        }
        let pa = build_pyramid(a, 3).unwrap();
        let pb = build_pyramid(noise, 3).unwrap();
        let params = LkParams::default();
        let mut total = 0;
        let mut lost = 0;
        for y in (20..80).step_by(7) {
            for x in (20..110).step_by(7) {
                total += 1;
                match track_feature(&pa, &pb, Vector2::new(x as f64, y as f64), None, &params) {
                    LkOutcome::Lost(_) => lost += 1,
                    LkOutcome::Converged { .. } => {}
                }
            }
        }
        assert!(
            lost * 10 >= total * 9,
            "only {lost}/{total} tracks were rejected"
        );
    }

    #[test]
    fn ncc_identities() {
        let patch: Vec<f64> = (0..121).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let negated: Vec<f64> = patch.iter().map(|v| -v).collect();
        assert!((ncc(&patch, &patch) - 1.0).abs() < 1e-12);
        assert!((ncc(&patch, &negated) + 1.0).abs() < 1e-12);
        let flat = vec![0.5; 121];
        assert_eq!(ncc(&flat, &patch), 0.0);
    }

    #[test]
    fn leaving_the_image_loses_the_track() {
        let a = render(96, 96, Vector2::zeros());
        let b = render(96, 96, Vector2::new(40.0, 0.0));
        let pa = build_pyramid(a, 3).unwrap();
        let pb = build_pyramid(b, 3).unwrap();
        // Feature near the right edge ends far outside after the shift.
        let out = track_feature(&pa, &pb, Vector2::new(88.0, 48.0), None, &LkParams::default());
        assert!(matches!(out, LkOutcome::Lost(_)));
    }

    #[test]
    fn cross_camera_prior_lands_on_the_disparity() {
        // Disparity 20 px: fx * baseline / depth = 400 * 0.1 / 2.
        let disparity = 20.0;
        let left = render(160, 120, Vector2::zeros());
        let right = render(160, 120, Vector2::new(-disparity, 0.0));
        let pl = build_pyramid(left, 3).unwrap();
        let pr = build_pyramid(right, 3).unwrap();
        let positions: Vec<Vector2<f64>> = (40..120)
            .step_by(16)
            .map(|x| Vector2::new(x as f64, 60.0))
            .collect();
        let outcomes = cross_camera_track(
            &pl,
            &pr,
            &positions,
            Some(Vector2::new(-disparity + 1.5, 0.0)),
            &LkParams::default(),
        );
        let mut checked = 0;
        for (start, out) in positions.iter().zip(outcomes.iter()) {
            if let LkOutcome::Converged { position, .. } = out {
                let measured = start.x - position.x;
                assert!(
                    (measured - disparity).abs() < 0.2,
                    "disparity {measured} vs {disparity}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 4);
    }
}
