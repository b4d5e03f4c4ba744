//! Rectified pinhole camera model and multi-camera rig extrinsics.

use nalgebra::{Matrix2x3, Vector2, Vector3};

use super::se3::RigidTransform;
use super::GeometryError;

/// Points closer than this to the image plane are treated as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Rectified pinhole intrinsics. Distortion is assumed removed upstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Projects a camera-frame point to pixel coordinates. No bounds check;
    /// callers decide visibility.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p_cam.z <= DEPTH_EPSILON {
            return Err(GeometryError::BehindCamera { z: p_cam.z });
        }
        Ok(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Lifts a pixel to the camera-frame point at the given depth (z = depth).
    pub fn unproject(&self, px: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::InvalidDepth { depth });
        }
        Ok(Vector3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// d(pixel)/d(camera point) at `p_cam`; caller guarantees z > epsilon.
    pub fn project_jacobian(&self, p_cam: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p_cam.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p_cam.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p_cam.y * iz2,
        )
    }

    /// True when the pixel lies at least `margin` px inside the image.
    pub fn contains(&self, px: &Vector2<f64>, margin: f64) -> bool {
        px.x >= margin
            && px.y >= margin
            && px.x <= self.width as f64 - 1.0 - margin
            && px.y <= self.height as f64 - 1.0 - margin
    }
}

/// One camera of a rig: intrinsics plus the camera-from-base extrinsic.
#[derive(Debug, Clone, Copy)]
pub struct RigCamera {
    pub model: CameraModel,
    /// Maps base-frame points into this camera's frame.
    pub extrinsic: RigidTransform,
}

/// Ordered, non-empty list of rig cameras.
#[derive(Debug, Clone)]
pub struct CameraRig {
    cameras: Vec<RigCamera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<RigCamera>) -> Self {
        assert!(!cameras.is_empty(), "rig needs at least one camera");
        Self { cameras }
    }

    /// Single camera at the base origin.
    pub fn monocular(model: CameraModel) -> Self {
        Self::new(vec![RigCamera {
            model,
            extrinsic: RigidTransform::identity(),
        }])
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn camera(&self, index: usize) -> &RigCamera {
        &self.cameras[index]
    }

    pub fn cameras(&self) -> &[RigCamera] {
        &self.cameras
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn unit_focal_projection() {
        let cam = CameraModel::new(1.0, 1.0, 0.0, 0.0, 10, 10);
        let px = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn projection_arithmetic() {
        let cam = CameraModel::new(100.0, 100.0, 320.0, 320.0, 640, 640);
        let px = cam.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vector2::new(370.0, 320.0));
    }

    #[test]
    fn zero_depth_is_behind_camera() {
        let cam = CameraModel::new(100.0, 100.0, 320.0, 320.0, 640, 640);
        assert!(matches!(
            cam.project(&Vector3::new(0.1, 0.2, 0.0)),
            Err(GeometryError::BehindCamera { .. })
        ));
    }

    #[test]
    fn principal_point_unprojects_on_axis() {
        let cam = CameraModel::new(400.0, 420.0, 320.0, 240.0, 640, 480);
        let p = cam.unproject(&Vector2::new(320.0, 240.0), 5.0).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 5.0), epsilon = 1e-15);
    }

    #[test]
    fn zero_depth_unproject_is_an_error() {
        let cam = CameraModel::new(400.0, 420.0, 320.0, 240.0, 640, 480);
        assert!(matches!(
            cam.unproject(&Vector2::new(10.0, 10.0), 0.0),
            Err(GeometryError::InvalidDepth { .. })
        ));
    }

    #[test]
    fn project_unproject_round_trip() {
        let cam = CameraModel::new(400.0, 420.0, 320.0, 240.0, 640, 480);
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..500 {
            let px = Vector2::new(
                rng.random_range(0.0..639.0),
                rng.random_range(0.0..479.0),
            );
            let depth = rng.random_range(0.05..50.0);
            let p = cam.unproject(&px, depth).unwrap();
            assert_relative_eq!(p.z, depth, epsilon = 1e-12);
            let back = cam.project(&p).unwrap();
            assert!((back - px).norm() < 1e-9);
        }
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let cam = CameraModel::new(400.0, 420.0, 320.0, 240.0, 640, 480);
        let mut rng = StdRng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..100 {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..10.0),
            );
            let jac = cam.project_jacobian(&p);
            for col in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[col] += h;
                pm[col] -= h;
                let fd = (cam.project(&pp).unwrap() - cam.project(&pm).unwrap()) / (2.0 * h);
                assert!((fd - jac.column(col)).abs().max() < 1e-4);
            }
        }
    }
}
