//! Grid-balanced corner selection.
//!
//! The image is split into an N x M grid and each cell contributes its top
//! keypoints by the minimum-eigenvalue corner measure, computed from a 3x3
//! Sobel-gradient structure tensor. The per-cell quota is derived from the
//! minimum total so that `k * N * M` strictly exceeds the requested count.

use nalgebra::Vector2;

use super::image::ImagePyramid;
use super::track::Track;

#[derive(Debug, Clone, Copy)]
pub struct FeatureGridConfig {
    /// Grid columns (N).
    pub grid_cols: usize,
    /// Grid rows (M).
    pub grid_rows: usize,
    /// Minimum keypoints per image (K_I).
    pub min_total: usize,
    /// Corner-measure floor; cells yield nothing below it.
    pub min_score: f64,
    /// Minimum distance to any existing or already selected keypoint, px.
    pub min_separation: f64,
}

impl Default for FeatureGridConfig {
    fn default() -> Self {
        Self {
            grid_cols: 8,
            grid_rows: 6,
            min_total: 300,
            min_score: 1e-4,
            min_separation: 7.0,
        }
    }
}

impl FeatureGridConfig {
    /// Per-cell quota: `floor(K_I / (N * M)) + 1`.
    pub fn per_cell(&self) -> usize {
        self.min_total / (self.grid_cols * self.grid_rows) + 1
    }
}

/// Minimum-eigenvalue corner score map. Border pixels (2 px) score zero.
/// Exposed for the brute-force selection oracle in tests.
pub fn corner_score_map(image: &super::image::GrayImage) -> Vec<f64> {
    let w = image.width();
    let h = image.height();
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: i64, dy: i64| {
                image.at((x as i64 + dx) as usize, (y as i64 + dy) as usize) as f64
            };
            gx[y * w + x] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)
                - p(-1, -1)
                - 2.0 * p(-1, 0)
                - p(-1, 1))
                / 8.0;
            gy[y * w + x] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)
                - p(-1, -1)
                - 2.0 * p(0, -1)
                - p(1, -1))
                / 8.0;
        }
    }

    let mut score = vec![0.0f64; w * h];
    if w < 5 || h < 5 {
        return score;
    }
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let mut sxx = 0.0;
            let mut sxy = 0.0;
            let mut syy = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let idx = ((y as i64 + dy) as usize) * w + (x as i64 + dx) as usize;
                    sxx += gx[idx] * gx[idx];
                    sxy += gx[idx] * gy[idx];
                    syy += gy[idx] * gy[idx];
                }
            }
            let trace = sxx + syy;
            let det_term = ((sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy).sqrt();
            score[y * w + x] = 0.5 * (trace - det_term);
        }
    }
    score
}

/// Selects up to `per_cell` new keypoints in every grid cell of the base
/// pyramid level, deterministically ranked by (score desc, row, col) and
/// suppressed near live existing tracks. Low-texture cells may yield fewer.
pub fn select_features(
    pyramid: &ImagePyramid,
    config: &FeatureGridConfig,
    existing: &[Track],
) -> Vec<Vector2<f64>> {
    let image = pyramid.base();
    let w = image.width();
    let h = image.height();
    let score = corner_score_map(image);
    let k = config.per_cell();

    let cell_w = w.div_ceil(config.grid_cols);
    let cell_h = h.div_ceil(config.grid_rows);

    let mut taken: Vec<Vector2<f64>> = existing
        .iter()
        .filter(|t| t.is_live())
        .map(|t| t.position())
        .collect();
    let min_sep_sq = config.min_separation * config.min_separation;
    let mut selected = Vec::new();

    for cell_y in 0..config.grid_rows {
        for cell_x in 0..config.grid_cols {
            let x0 = cell_x * cell_w;
            let y0 = cell_y * cell_h;
            let x1 = (x0 + cell_w).min(w);
            let y1 = (y0 + cell_h).min(h);

            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let s = score[y * w + x];
                    if s >= config.min_score {
                        candidates.push((s, y, x));
                    }
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });

            let mut in_cell = 0;
            for (_, y, x) in candidates {
                if in_cell >= k {
                    break;
                }
                let p = Vector2::new(x as f64, y as f64);
                let clear = taken
                    .iter()
                    .all(|q| (p - q).norm_squared() >= min_sep_sq);
                if clear {
                    taken.push(p);
                    selected.push(p);
                    in_cell += 1;
                }
            }
        }
    }
    selected
}
