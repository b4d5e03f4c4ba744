//! Frustum Intersection Graph: which cameras share a field of view, and in
//! which direction cross-camera tracking runs.

use nalgebra::Vector2;

use crate::geometry::CameraRig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumEdge {
    pub from: usize,
    pub to: usize,
    /// Fraction of sampled pixels that projected into the target camera.
    pub overlap: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FrustumGraph {
    pub cameras: usize,
    pub edges: Vec<FrustumEdge>,
}

impl FrustumGraph {
    pub fn edge(&self, from: usize, to: usize) -> Option<&FrustumEdge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    /// Cameras that act as a tracking source. Falls back to camera 0 for
    /// rigs without any overlap (monocular).
    pub fn source_cameras(&self) -> Vec<usize> {
        let mut sources: Vec<usize> = self.edges.iter().map(|e| e.from).collect();
        sources.sort_unstable();
        sources.dedup();
        if sources.is_empty() {
            sources.push(0);
        }
        sources
    }

    pub fn edges_from(&self, camera: usize) -> impl Iterator<Item = &FrustumEdge> {
        self.edges.iter().filter(move |e| e.from == camera)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FigConfig {
    /// Distance of the sampling plane in front of each source camera, m.
    pub plane_distance: f64,
    /// The sampling grid is `samples_per_axis` squared.
    pub samples_per_axis: usize,
    /// Strictly-greater overlap ratio needed to create an edge.
    pub overlap_threshold: f64,
}

impl Default for FigConfig {
    fn default() -> Self {
        Self {
            plane_distance: 3.0,
            samples_per_axis: 16,
            overlap_threshold: 0.2,
        }
    }
}

/// Builds the FIG: for every ordered camera pair, a uniform pixel grid of
/// the source camera is lifted onto a plane orthogonal to its optical axis
/// and projected into the target camera; enough surviving samples create a
/// directed edge. Deterministic.
pub fn build_frustum_graph(rig: &CameraRig, config: &FigConfig) -> FrustumGraph {
    let n = rig.len();
    let mut edges = Vec::new();
    let s = config.samples_per_axis.max(2);
    for i in 0..n {
        let cam_i = rig.camera(i);
        let base_from_i = cam_i.extrinsic.inverse();
        for j in 0..n {
            if i == j {
                continue;
            }
            let cam_j = rig.camera(j);
            let mut hits = 0usize;
            for sy in 0..s {
                for sx in 0..s {
                    let px = Vector2::new(
                        (cam_i.model.width - 1) as f64 * sx as f64 / (s - 1) as f64,
                        (cam_i.model.height - 1) as f64 * sy as f64 / (s - 1) as f64,
                    );
                    let Ok(p_i) = cam_i.model.unproject(&px, config.plane_distance) else {
                        continue;
                    };
                    let p_j = cam_j
                        .extrinsic
                        .transform_point(&base_from_i.transform_point(&p_i));
                    if p_j.z <= 0.0 {
                        continue;
                    }
                    let Ok(out) = cam_j.model.project(&p_j) else {
                        continue;
                    };
                    // Epsilon slack keeps border pixels that round-trip to
                    // e.g. 639.0000000001 counted as inside.
                    if cam_j.model.contains(&out, -1e-6) {
                        hits += 1;
                    }
                }
            }
            let overlap = hits as f64 / (s * s) as f64;
            if overlap > config.overlap_threshold {
                edges.push(FrustumEdge {
                    from: i,
                    to: j,
                    overlap,
                });
            }
        }
    }
    FrustumGraph { cameras: n, edges }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, CameraModel, RigCamera, RigidTransform, Twist};
    use nalgebra::Vector3;

    /// 90-degree horizontal FoV camera.
    fn fov90() -> CameraModel {
        // fx = (w-1)/2 so the full horizontal FoV spans exactly 90 degrees
        // between the outermost pixel centers.
        CameraModel::new(319.5, 319.5, 319.5, 239.5, 640, 480)
    }

    #[test]
    fn colocated_cameras_fully_overlap() {
        let rig = CameraRig::new(vec![
            RigCamera {
                model: fov90(),
                extrinsic: RigidTransform::identity(),
            },
            RigCamera {
                model: fov90(),
                extrinsic: RigidTransform::identity(),
            },
        ]);
        let fig = build_frustum_graph(&rig, &FigConfig::default());
        assert_eq!(fig.edges.len(), 2);
        assert_eq!(fig.edge(0, 1).unwrap().overlap, 1.0);
        assert_eq!(fig.edge(1, 0).unwrap().overlap, 1.0);
    }

    #[test]
    fn opposite_facing_cameras_share_nothing() {
        let turned = se3_exp(&Twist::new(
            Vector3::new(0.0, std::f64::consts::PI, 0.0),
            Vector3::zeros(),
        ));
        let rig = CameraRig::new(vec![
            RigCamera {
                model: fov90(),
                extrinsic: RigidTransform::identity(),
            },
            RigCamera {
                model: fov90(),
                extrinsic: turned,
            },
        ]);
        let fig = build_frustum_graph(&rig, &FigConfig::default());
        assert!(fig.edges.is_empty());
        assert_eq!(fig.source_cameras(), vec![0]);
    }

    #[test]
    fn stereo_overlap_matches_the_analytic_count() {
        // Identical cameras, baseline 0.1 m along +x, plane at 3 m. A grid
        // sample of camera 0 lands inside camera 1 iff its pixel, shifted
        // by the disparity fx*b/d, stays in bounds.
        let baseline = 0.1;
        let distance = 3.0;
        let model = fov90();
        let right = RigidTransform::from_parts(
            nalgebra::UnitQuaternion::identity(),
            Vector3::new(-baseline, 0.0, 0.0),
        );
        let rig = CameraRig::new(vec![
            RigCamera {
                model,
                extrinsic: RigidTransform::identity(),
            },
            RigCamera {
                model,
                extrinsic: right,
            },
        ]);
        let config = FigConfig {
            plane_distance: distance,
            samples_per_axis: 16,
            overlap_threshold: 0.2,
        };
        let fig = build_frustum_graph(&rig, &config);

        let disparity = model.fx * baseline / distance;
        let s = config.samples_per_axis;
        let mut cols_inside = 0;
        for sx in 0..s {
            let u = (model.width - 1) as f64 * sx as f64 / (s - 1) as f64;
            let shifted = u - disparity;
            if shifted >= 0.0 && shifted <= (model.width - 1) as f64 {
                cols_inside += 1;
            }
        }
        let expected = cols_inside as f64 * s as f64 / (s * s) as f64;
        let got = fig.edge(0, 1).unwrap().overlap;
        assert!(
            (got - expected).abs() < 1e-6,
            "overlap {got} vs analytic {expected}"
        );
    }

    #[test]
    fn invariant_under_rig_wide_motion() {
        let model = fov90();
        let make_rig = |tail: RigidTransform| {
            CameraRig::new(vec![
                RigCamera {
                    model,
                    extrinsic: se3_exp(&Twist::new(
                        Vector3::new(0.0, 0.1, 0.0),
                        Vector3::new(0.05, 0.0, 0.0),
                    ))
                    .compose(&tail),
                },
                RigCamera {
                    model,
                    extrinsic: se3_exp(&Twist::new(
                        Vector3::new(0.0, -0.15, 0.02),
                        Vector3::new(-0.07, 0.01, 0.0),
                    ))
                    .compose(&tail),
                },
            ])
        };
        let base = build_frustum_graph(&make_rig(RigidTransform::identity()), &FigConfig::default());
        let moved = build_frustum_graph(
            &make_rig(se3_exp(&Twist::new(
                Vector3::new(0.5, -0.3, 0.8),
                Vector3::new(3.0, -2.0, 1.0),
            ))),
            &FigConfig::default(),
        );
        assert_eq!(base.edges.len(), moved.edges.len());
        for (a, b) in base.edges.iter().zip(moved.edges.iter()) {
            assert_eq!((a.from, a.to), (b.from, b.to));
            assert!((a.overlap - b.overlap).abs() < 1e-9);
        }
    }
}
