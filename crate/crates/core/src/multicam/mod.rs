//! Multi-camera odometry: the Frustum Intersection Graph and the sparse
//! tracking/keyframing/PnP engine that every sparse mode runs on.

mod fig;
mod odometry;

pub use fig::{build_frustum_graph, FigConfig, FrustumEdge, FrustumGraph};
pub use odometry::{
    CameraFrameData, FrameInput, KeyframeEvent, OdometryConfig, SparseOdometry, StepError,
    StepOutput, StepStatus,
};
