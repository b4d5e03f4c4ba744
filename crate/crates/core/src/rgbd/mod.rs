//! Dense RGB-D frame-to-frame alignment: warped intensity/depth residuals,
//! point-to-point factors, and the combined coarse-to-fine solver.

mod depth;
mod residuals;
mod solve;

pub use depth::{halved_camera, DepthImage};
pub use residuals::{
    dense_residuals, point_to_point_residuals, select_dense_pixels, DensePixelSet,
    PixelSelectConfig, PointRow, ResidualRow, Warp, warp,
};
pub use solve::{solve_rgbd, MapFactor, RgbdConfig, RgbdError, RgbdFrame, RgbdResult};
