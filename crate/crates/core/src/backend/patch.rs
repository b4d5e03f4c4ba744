//! 9x9 multi-scale patch features for loop-closure verification.

use nalgebra::{Matrix2, Vector2};

use crate::frontend2d::{ncc, ImagePyramid};

pub const PATCH_SIZE: usize = 9;
const HALF: i64 = (PATCH_SIZE as i64 - 1) / 2;

/// One 9x9 intensity patch per pyramid level, anchored at a keypoint of the
/// keyframe image it was extracted from.
#[derive(Debug, Clone)]
pub struct PatchFeature {
    pub anchor: Vector2<f64>,
    pub camera: usize,
    /// Row-major 9x9 patches, one per pyramid level.
    pub levels: Vec<[f64; PATCH_SIZE * PATCH_SIZE]>,
}

/// Extracts a patch stack at `anchor`; None when any level would sample
/// outside its image.
pub fn extract_patch_feature(
    pyramid: &ImagePyramid,
    anchor: Vector2<f64>,
    camera: usize,
) -> Option<PatchFeature> {
    let mut levels = Vec::with_capacity(pyramid.num_levels());
    for l in 0..pyramid.num_levels() {
        let scale = (1u32 << l) as f64;
        let image = pyramid.level(l);
        let c = anchor / scale;
        if !image.in_bounds(c.x, c.y, HALF as f64 + 1.0) {
            return None;
        }
        let mut patch = [0.0; PATCH_SIZE * PATCH_SIZE];
        let mut idx = 0;
        for dy in -HALF..=HALF {
            for dx in -HALF..=HALF {
                patch[idx] = image.sample(c.x + dx as f64, c.y + dy as f64);
                idx += 1;
            }
        }
        levels.push(patch);
    }
    Some(PatchFeature {
        anchor,
        camera,
        levels,
    })
}

/// Coarse-to-fine LK tracking of a stored patch stack into a new pyramid,
/// seeded at `seed` (full-resolution pixels). The template gradients come
/// from the stored patch interior; an NCC gate runs at every level.
pub fn track_patch(
    feature: &PatchFeature,
    pyramid: &ImagePyramid,
    seed: Vector2<f64>,
    ncc_min: f64,
    max_iterations: usize,
) -> Option<(Vector2<f64>, f64)> {
    let levels = feature.levels.len().min(pyramid.num_levels());
    let top_scale = (1u32 << (levels - 1)) as f64;
    let mut pos = seed / top_scale;
    let mut score = -1.0;

    for l in (0..levels).rev() {
        let image = pyramid.level(l);
        let patch = &feature.levels[l];
        let at = |dx: i64, dy: i64| patch[((dy + HALF) * PATCH_SIZE as i64 + dx + HALF) as usize];

        // Template gradients over the 7x7 interior.
        let mut tensor = Matrix2::zeros();
        let mut grads = Vec::with_capacity(49);
        for dy in -(HALF - 1)..=(HALF - 1) {
            for dx in -(HALF - 1)..=(HALF - 1) {
                let gx = (at(dx + 1, dy) - at(dx - 1, dy)) * 0.5;
                let gy = (at(dx, dy + 1) - at(dx, dy - 1)) * 0.5;
                tensor[(0, 0)] += gx * gx;
                tensor[(0, 1)] += gx * gy;
                tensor[(1, 0)] += gx * gy;
                tensor[(1, 1)] += gy * gy;
                grads.push((gx, gy));
            }
        }
        let inv = tensor.try_inverse()?;

        for _ in 0..max_iterations {
            if !image.in_bounds(pos.x, pos.y, HALF as f64 + 1.0) {
                return None;
            }
            let mut b = Vector2::zeros();
            let mut gi = 0;
            for dy in -(HALF - 1)..=(HALF - 1) {
                for dx in -(HALF - 1)..=(HALF - 1) {
                    let diff =
                        at(dx, dy) - image.sample(pos.x + dx as f64, pos.y + dy as f64);
                    let (gx, gy) = grads[gi];
                    b.x += diff * gx;
                    b.y += diff * gy;
                    gi += 1;
                }
            }
            let eta = inv * b;
            pos += eta;
            if eta.norm() < 0.01 {
                break;
            }
        }

        if !image.in_bounds(pos.x, pos.y, HALF as f64 + 1.0) {
            return None;
        }
        let mut target = [0.0; PATCH_SIZE * PATCH_SIZE];
        let mut idx = 0;
        for dy in -HALF..=HALF {
            for dx in -HALF..=HALF {
                target[idx] = image.sample(pos.x + dx as f64, pos.y + dy as f64);
                idx += 1;
            }
        }
        score = ncc(patch, &target);
        if score < ncc_min {
            return None;
        }
        if l > 0 {
            pos *= 2.0;
        }
    }
    Some((pos, score))
}
