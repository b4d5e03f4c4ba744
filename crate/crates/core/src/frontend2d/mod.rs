//! 2D frontend: image pyramids, grid keypoint selection, pyramidal LK
//! tracking with NCC gating, and the keyframe trigger.

mod features;
mod image;
mod lk;
mod track;

pub use features::{corner_score_map, select_features, FeatureGridConfig};
pub use image::{build_pyramid, GrayImage, ImageError, ImagePyramid};
pub use lk::{cross_camera_track, ncc, track_feature, track_lk, LkOutcome, LkParams, LossReason};
pub use track::{keyframe_due, KeyframeError, KeyframePolicy, Track, TrackStatus};
