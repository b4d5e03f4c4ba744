//! Asynchronous global mapping: keyframe integration, loop-closure
//! detection over a spatial index, and pose-graph optimization.

mod global_map;
mod kdtree;
mod loop_closing;
mod patch;
mod pose_graph;
mod worker;

pub use global_map::{
    GlobalKeyframe, GlobalLandmark, GlobalMap, GlobalMapError, GlobalObservation, KeyframePayload,
};
pub use kdtree::{linear_radius_scan, KdTree};
pub use loop_closing::{
    estimate_loop_delta, select_loop_landmarks, LoopConfig, LoopDelta, LoopMatch, LoopQueryFrame,
    LoopRejection,
};
pub use patch::{extract_patch_feature, track_patch, PatchFeature, PATCH_SIZE};
pub use pose_graph::{
    edge_residual, optimize_pose_graph, NodeId, PgoError, PgoResult, PoseGraphEdge,
};
pub use worker::{Backend, BackendConfig, BackendJob, BackendOutput, LoopEvent, LoopQueryData};
