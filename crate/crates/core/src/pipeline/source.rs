//! Frame-source abstraction feeding the pipeline.

use crate::frontend2d::GrayImage;
use crate::multicam::FrameInput;
use crate::rgbd::DepthImage;
use crate::vio::ImuSample;

/// One synchronized bundle handed to the pipeline.
pub struct PipelineFrame {
    /// Sparse per-camera content (images or exact observations).
    pub input: FrameInput,
    /// Intensity/depth pair for the dense mono-depth mode.
    pub rgbd: Option<(GrayImage, DepthImage)>,
    /// IMU samples since the previous bundle (inclusive boundaries).
    pub imu: Vec<ImuSample>,
}

/// Yields synchronized frame bundles in time order.
pub trait FrameSource {
    fn rig(&self) -> crate::geometry::CameraRig;
    fn next_bundle(&mut self) -> Option<PipelineFrame>;
}
