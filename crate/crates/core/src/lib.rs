//! CPU-first visual SLAM toolkit.
//!
//! The crate is split along the frontend/backend boundary of the pipeline:
//! per-frame pose estimation (feature tracking, PnP, bundle adjustment,
//! visual-inertial and dense RGB-D solvers) lives in the frontend-facing
//! modules, while loop closing and pose-graph optimization live in
//! [`backend`]. [`pipeline`] wires the modes together and [`eval`] provides
//! dataset ingestion, synthetic scenes, and trajectory metrics.

pub mod backend;
pub mod frontend2d;
pub mod geometry;
pub mod localmap;
pub mod multicam;
pub mod rgbd;
pub mod solvers;
pub mod vio;
