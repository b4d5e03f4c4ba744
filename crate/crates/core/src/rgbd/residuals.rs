//! Warped intensity/depth residuals and the point-to-point factor.

use nalgebra::{Matrix2x3, Matrix3, RowVector6, Vector2, Vector3};

use crate::frontend2d::GrayImage;
use crate::geometry::{skew, CameraModel, RigidTransform, DEPTH_EPSILON};

use super::depth::DepthImage;

/// Result of warping a pixel through a relative transform.
#[derive(Debug, Clone, Copy)]
pub enum Warp {
    /// Warped pixel inside the destination bounds.
    Inside(Vector2<f64>),
    /// Valid projection that lands outside the image.
    Outside(Vector2<f64>),
    /// Transformed point ended up behind the camera.
    Behind,
}

/// Lifts `px` to 3D at the given depth, applies `t`, and projects back.
pub fn warp(t: &RigidTransform, cam: &CameraModel, px: &Vector2<f64>, depth: f64) -> Warp {
    let Ok(p) = cam.unproject(px, depth) else {
        return Warp::Behind;
    };
    let q = t.transform_point(&p);
    if q.z <= DEPTH_EPSILON {
        return Warp::Behind;
    }
    let out = cam.project(&q).expect("depth already checked");
    if cam.contains(&out, 1.0) {
        Warp::Inside(out)
    } else {
        Warp::Outside(out)
    }
}

/// Pixels entering the dense terms: image-gradient magnitude above a
/// threshold, valid depth, spread over a coarse grid with a per-cell budget.
#[derive(Debug, Clone, Default)]
pub struct DensePixelSet {
    pub pixels: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct PixelSelectConfig {
    pub gradient_threshold: f64,
    pub budget: usize,
    pub grid: usize,
}

impl Default for PixelSelectConfig {
    fn default() -> Self {
        Self {
            gradient_threshold: 0.02,
            budget: 1024,
            grid: 8,
        }
    }
}

pub fn select_dense_pixels(
    intensity: &GrayImage,
    depth: &DepthImage,
    config: &PixelSelectConfig,
) -> DensePixelSet {
    let w = intensity.width();
    let h = intensity.height();
    let cell_w = w.div_ceil(config.grid);
    let cell_h = h.div_ceil(config.grid);
    let per_cell = (config.budget / (config.grid * config.grid)).max(1);
    let mut pixels = Vec::new();

    for cy in 0..config.grid {
        for cx in 0..config.grid {
            let x0 = (cx * cell_w).max(1);
            let y0 = (cy * cell_h).max(1);
            let x1 = ((cx + 1) * cell_w).min(w - 1);
            let y1 = ((cy + 1) * cell_h).min(h - 1);
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    if !depth.is_valid(x, y) {
                        continue;
                    }
                    let gx =
                        (intensity.at(x + 1, y) as f64 - intensity.at(x - 1, y) as f64) * 0.5;
                    let gy =
                        (intensity.at(x, y + 1) as f64 - intensity.at(x, y - 1) as f64) * 0.5;
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag >= config.gradient_threshold {
                        cands.push((mag, y, x));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for (_, y, x) in cands.into_iter().take(per_cell) {
                pixels.push(Vector2::new(x as f64, y as f64));
            }
        }
    }
    DensePixelSet { pixels }
}

/// One scalar residual row with its pose Jacobian (twist order
/// [rotation | translation]).
#[derive(Debug, Clone, Copy)]
pub struct ResidualRow {
    pub value: f64,
    pub jacobian: RowVector6<f64>,
}

/// d(camera point)/d(left-multiplicative pose increment).
fn dpoint_forward(q: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    // p = Exp(d) T x: dp/dw = -[p]x, dp/dv = I with p evaluated post-T.
    (-skew(q), Matrix3::identity())
}

fn pixel_jacobian_rows(
    jproj: &Matrix2x3<f64>,
    dw: &Matrix3<f64>,
    dv: &Matrix3<f64>,
) -> (RowVector6<f64>, RowVector6<f64>) {
    let jw = jproj * dw;
    let jv = jproj * dv;
    let mut row_x = RowVector6::zeros();
    let mut row_y = RowVector6::zeros();
    for c in 0..3 {
        row_x[c] = jw[(0, c)];
        row_x[3 + c] = jv[(0, c)];
        row_y[c] = jw[(1, c)];
        row_y[3 + c] = jv[(1, c)];
    }
    (row_x, row_y)
}

/// Dense intensity and depth residuals for one direction of the symmetric
/// objective: pixels of the source frame warped into the destination.
///
/// `transform` maps source-camera points into the destination camera.
/// Invalid warps and depth holes are skipped, not zero-filled. When
/// `jacobian_sign` is negative the pose Jacobians are for the inverse
/// direction (the backward rows of the symmetric objective, where the
/// optimized variable is the forward transform).
#[allow(clippy::too_many_arguments)]
fn accumulate_direction(
    src_intensity: &GrayImage,
    src_depth: &DepthImage,
    dst_intensity: &GrayImage,
    dst_depth: &DepthImage,
    cam: &CameraModel,
    transform: &RigidTransform,
    forward: bool,
    pixels: &DensePixelSet,
    intensity_weight: f64,
    depth_sigma_coeff: f64,
    intensity_rows: &mut Vec<ResidualRow>,
    depth_rows: &mut Vec<ResidualRow>,
) {
    let r_inv = transform.rotation_matrix();
    for px in &pixels.pixels {
        let Some(z_src) = src_depth.depth_at(px) else {
            continue;
        };
        let Ok(p_src) = cam.unproject(px, z_src) else {
            continue;
        };
        let q = transform.transform_point(&p_src);
        if q.z <= DEPTH_EPSILON {
            continue;
        }
        let Ok(u) = cam.project(&q) else { continue };
        if !cam.contains(&u, 1.0) {
            continue;
        }

        // Pose Jacobian of the destination point q. Forward direction:
        // q = Exp(d) T p. Backward: q = (Exp(d) T)^-1 p = T^-1 Exp(-d) p,
        // so dq/dw = R_inv [p]x, dq/dv = -R_inv with R_inv = rot(T^-1).
        let (dw, dv) = if forward {
            dpoint_forward(&q)
        } else {
            (r_inv * skew(&p_src), -r_inv)
        };
        let jproj = cam.project_jacobian(&q);
        let (row_u, row_v) = pixel_jacobian_rows(&jproj, &dw, &dv);

        let src_i = src_intensity.sample(px.x, px.y);
        let (dst_i, gx, gy) = dst_intensity.sample_with_gradient(u.x, u.y);
        let jac_i = (row_u * gx + row_v * gy) * intensity_weight;
        intensity_rows.push(ResidualRow {
            value: (dst_i - src_i) * intensity_weight,
            jacobian: jac_i,
        });

        if let Some((dst_z, zgx, zgy)) = dst_depth.sample_with_gradient(u.x, u.y) {
            let sigma_z = (depth_sigma_coeff * q.z * q.z).max(1e-6);
            let wz = 1.0 / sigma_z;
            // r = Z_dst(u) - q_z.
            let mut dqz = RowVector6::zeros();
            for c in 0..3 {
                dqz[c] = dw[(2, c)];
                dqz[3 + c] = dv[(2, c)];
            }
            let jac_z = (row_u * zgx + row_v * zgy - dqz) * wz;
            depth_rows.push(ResidualRow {
                value: (dst_z - q.z) * wz,
                jacobian: jac_z,
            });
        }
    }
}

/// Stacked symmetric dense residuals (both warp directions) at the current
/// relative transform `t_21` (frame-1 camera into frame-2 camera).
#[allow(clippy::too_many_arguments)]
pub fn dense_residuals(
    intensity1: &GrayImage,
    depth1: &DepthImage,
    intensity2: &GrayImage,
    depth2: &DepthImage,
    cam: &CameraModel,
    t_21: &RigidTransform,
    pixels1: &DensePixelSet,
    pixels2: &DensePixelSet,
    intensity_sigma: f64,
    depth_sigma_coeff: f64,
) -> (Vec<ResidualRow>, Vec<ResidualRow>) {
    let mut intensity_rows = Vec::new();
    let mut depth_rows = Vec::new();
    let iw = 1.0 / intensity_sigma;
    accumulate_direction(
        intensity1,
        depth1,
        intensity2,
        depth2,
        cam,
        t_21,
        true,
        pixels1,
        iw,
        depth_sigma_coeff,
        &mut intensity_rows,
        &mut depth_rows,
    );
    let t_12 = t_21.inverse();
    accumulate_direction(
        intensity2,
        depth2,
        intensity1,
        depth1,
        cam,
        &t_12,
        false,
        pixels2,
        iw,
        depth_sigma_coeff,
        &mut intensity_rows,
        &mut depth_rows,
    );
    (intensity_rows, depth_rows)
}

/// A 3-vector point-to-point residual row block.
#[derive(Debug, Clone, Copy)]
pub struct PointRow {
    pub value: Vector3<f64>,
    /// 3x6 Jacobian, twist order [rotation | translation].
    pub jac_w: Matrix3<f64>,
    pub jac_v: Matrix3<f64>,
}

/// `pi^-1(y, Z2(y)) - T pi^-1(x, Z1(x))` per 2D match; matches with a depth
/// hole at either endpoint are skipped.
pub fn point_to_point_residuals(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    depth1: &DepthImage,
    depth2: &DepthImage,
    cam: &CameraModel,
    t_21: &RigidTransform,
    sigma: f64,
) -> Vec<PointRow> {
    let w = 1.0 / sigma;
    let mut rows = Vec::new();
    for (x, y) in matches {
        let (Some(z1), Some(z2)) = (depth1.depth_at(x), depth2.depth_at(y)) else {
            continue;
        };
        let (Ok(p1), Ok(p2)) = (cam.unproject(x, z1), cam.unproject(y, z2)) else {
            continue;
        };
        let tp1 = t_21.transform_point(&p1);
        rows.push(PointRow {
            value: (p2 - tp1) * w,
            jac_w: skew(&tp1) * w,
            jac_v: -Matrix3::identity() * w,
        });
    }
    rows
}
