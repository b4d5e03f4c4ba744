//! Nonlinear least-squares core: the factor-graph LM engine, reprojection
//! factors, PnP, bundle adjustment, and the monocular two-view bootstrap.

pub mod factors;
pub mod pnp;
pub mod problem;
pub mod sba;
pub mod twoview;

pub use factors::{FixedPointReprojection, ReprojectionFactor};
pub use pnp::{solve_pnp, PnpConfig, PnpObservation, PnpResult, CHI2_2DOF_95};
pub use problem::{
    jacobian_relative_error, numeric_factor_jacobians, Factor, LinearSolver, LmReport,
    LmSettings, Problem, SolveError, Termination, VarKey, Variable,
};
pub use sba::{sparse_bundle_adjustment, SbaConfig, SbaResult};
pub use twoview::{
    estimate_fundamental_ransac, pose_from_fundamental, sampson_distance, FundamentalResult,
    RansacConfig,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("insufficient constraints: need {needed}, got {got} usable")]
    InsufficientConstraints { needed: usize, got: usize },
    #[error("optimization failed to accept any step")]
    NoConvergence,
    #[error("two-view bootstrap failed: {reason}")]
    BootstrapFailure { reason: &'static str },
}
