//! Grayscale intensity planes and box-filter pyramids.

use thiserror::Error;

/// Single-channel intensity image with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("data length {len} does not match {width}x{height}")]
    SizeMismatch {
        len: usize,
        width: usize,
        height: usize,
    },
    #[error("{levels} pyramid levels need at least {min}x{min} pixels, image is {width}x{height}")]
    TooManyLevels {
        levels: usize,
        min: usize,
        width: usize,
        height: usize,
    },
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch {
                len: data.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// ITU-R 601 luma from interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self, ImageError> {
        if rgb.len() != width * height * 3 {
            return Err(ImageError::SizeMismatch {
                len: rgb.len(),
                width,
                height,
            });
        }
        let data = rgb
            .chunks_exact(3)
            .map(|px| {
                (0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32) / 255.0
            })
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_luma8(width: usize, height: usize, luma: &[u8]) -> Result<Self, ImageError> {
        if luma.len() != width * height {
            return Err(ImageError::SizeMismatch {
                len: luma.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            data: luma.iter().map(|v| *v as f32 / 255.0).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// True when (x, y) can be sampled bilinearly with `margin` to spare.
    #[inline]
    pub fn in_bounds(&self, x: f64, y: f64, margin: f64) -> bool {
        x >= margin
            && y >= margin
            && x <= self.width as f64 - 1.0 - margin
            && y <= self.height as f64 - 1.0 - margin
    }

    /// Bilinear sample; caller guarantees bounds.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let v00 = self.at(x0, y0) as f64;
        let v10 = self.at(x1, y0) as f64;
        let v01 = self.at(x0, y1) as f64;
        let v11 = self.at(x1, y1) as f64;
        (1.0 - ax) * (1.0 - ay) * v00 + ax * (1.0 - ay) * v10 + (1.0 - ax) * ay * v01
            + ax * ay * v11
    }

    /// Central-difference intensity gradient at a bilinear position.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let gx = (self.sample(x + 1.0, y) - self.sample(x - 1.0, y)) * 0.5;
        let gy = (self.sample(x, y + 1.0) - self.sample(x, y - 1.0)) * 0.5;
        (gx, gy)
    }

    /// Bilinear sample together with the exact gradient of the bilinear
    /// surface at that point (the derivative the dense solvers linearize).
    pub fn sample_with_gradient(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let v00 = self.at(x0, y0) as f64;
        let v10 = self.at(x1, y0) as f64;
        let v01 = self.at(x0, y1) as f64;
        let v11 = self.at(x1, y1) as f64;
        let value = (1.0 - ax) * (1.0 - ay) * v00
            + ax * (1.0 - ay) * v10
            + (1.0 - ax) * ay * v01
            + ax * ay * v11;
        let gx = (1.0 - ay) * (v10 - v00) + ay * (v11 - v01);
        let gy = (1.0 - ax) * (v01 - v00) + ax * (v11 - v10);
        (value, gx, gy)
    }

    /// 2x2 box-filter downsample with floor-halved dimensions.
    pub fn downsample(&self) -> Self {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let sum = self.at(2 * x, 2 * y)
                    + self.at(2 * x + 1, 2 * y)
                    + self.at(2 * x, 2 * y + 1)
                    + self.at(2 * x + 1, 2 * y + 1);
                data.push(sum * 0.25);
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }
}

/// Coarse-to-fine stack of intensity planes; level 0 is full resolution and
/// every level halves the previous (floor division).
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    levels: Vec<GrayImage>,
}

impl ImagePyramid {
    pub fn build(image: GrayImage, levels: usize) -> Result<Self, ImageError> {
        assert!(levels >= 1, "pyramid needs at least one level");
        let min = 1usize << (levels - 1);
        if image.width() < min || image.height() < min {
            return Err(ImageError::TooManyLevels {
                levels,
                min,
                width: image.width(),
                height: image.height(),
            });
        }
        let mut stack = vec![image];
        for _ in 1..levels {
            let next = stack.last().expect("non-empty").downsample();
            stack.push(next);
        }
        Ok(Self { levels: stack })
    }

    /// Assembles a pyramid from pre-built planes; dimensions must follow
    /// the floor-halving rule. Used when levels are rendered or decoded
    /// externally rather than box-filtered.
    pub fn from_levels(levels: Vec<GrayImage>) -> Result<Self, ImageError> {
        assert!(!levels.is_empty());
        for pair in levels.windows(2) {
            if pair[1].width() != pair[0].width() / 2 || pair[1].height() != pair[0].height() / 2
            {
                return Err(ImageError::SizeMismatch {
                    len: pair[1].data().len(),
                    width: pair[0].width() / 2,
                    height: pair[0].height() / 2,
                });
            }
        }
        Ok(Self { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &GrayImage {
        &self.levels[l]
    }

    pub fn base(&self) -> &GrayImage {
        &self.levels[0]
    }
}

/// Convenience builder used across the frontend.
pub fn build_pyramid(image: GrayImage, levels: usize) -> Result<ImagePyramid, ImageError> {
    ImagePyramid::build(image, levels)
}
