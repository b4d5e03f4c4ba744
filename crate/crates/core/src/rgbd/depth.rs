//! Depth planes with hole masks.

use nalgebra::Vector2;

use crate::geometry::CameraModel;

/// Per-pixel depth in meters; zero, negative, or non-finite entries are
/// holes. Dimensions always match the paired intensity image.
#[derive(Debug, Clone)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let v = self.at(x, y);
        v.is_finite() && v > 0.0
    }

    /// Valid depth at integer coordinates.
    pub fn depth_at(&self, px: &Vector2<f64>) -> Option<f64> {
        let x = px.x.round();
        let y = px.y.round();
        if x < 0.0 || y < 0.0 || x as usize >= self.width || y as usize >= self.height {
            return None;
        }
        let (xi, yi) = (x as usize, y as usize);
        self.is_valid(xi, yi).then(|| self.at(xi, yi))
    }

    /// Bilinear depth plus the bilinear-surface gradient; None when any of
    /// the four support pixels is a hole or the point is out of bounds.
    pub fn sample_with_gradient(&self, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        if !(self.is_valid(x0, y0)
            && self.is_valid(x1, y0)
            && self.is_valid(x0, y1)
            && self.is_valid(x1, y1))
        {
            return None;
        }
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let v00 = self.at(x0, y0);
        let v10 = self.at(x1, y0);
        let v01 = self.at(x0, y1);
        let v11 = self.at(x1, y1);
        let value = (1.0 - ax) * (1.0 - ay) * v00
            + ax * (1.0 - ay) * v10
            + (1.0 - ax) * ay * v01
            + ax * ay * v11;
        let gx = (1.0 - ay) * (v10 - v00) + ay * (v11 - v01);
        let gy = (1.0 - ax) * (v01 - v00) + ax * (v11 - v10);
        Some((value, gx, gy))
    }

    /// Hole-aware 2x2 downsample: averages the valid entries of each quad,
    /// emits a hole when none are valid.
    pub fn downsample(&self) -> Self {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f64;
                let mut n = 0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if self.is_valid(sx, sy) {
                        sum += self.at(sx, sy);
                        n += 1;
                    }
                }
                data.push(if n > 0 { sum / n as f64 } else { 0.0 });
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }
}

/// Intrinsics for the next coarser pyramid level, consistent with 2x2
/// box-filter downsampling (pixel centers at the quad centers).
pub fn halved_camera(cam: &CameraModel) -> CameraModel {
    CameraModel::new(
        cam.fx * 0.5,
        cam.fy * 0.5,
        (cam.cx + 0.5) * 0.5 - 0.5,
        (cam.cy + 0.5) * 0.5 - 0.5,
        (cam.width / 2).max(1),
        (cam.height / 2).max(1),
    )
}
