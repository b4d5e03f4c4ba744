//! Globally consistent map: keyframe poses, landmarks, observations, patch
//! features, and the pose-delta edges feeding graph optimization.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::localmap::{KeyframeId, LandmarkId};

use super::kdtree::KdTree;
use super::patch::PatchFeature;
use super::pose_graph::PoseGraphEdge;

#[derive(Debug, Clone)]
pub struct GlobalObservation {
    pub landmark: LandmarkId,
    pub camera: usize,
    pub pixel: Vector2<f64>,
    /// Identity supplied by the frame source (synthetic streams); enables
    /// loop verification when no imagery is attached.
    pub external_id: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct GlobalKeyframe {
    pub id: KeyframeId,
    pub timestamp: f64,
    /// World-from-base pose, updated by pose-graph optimization.
    pub world_pose: RigidTransform,
    /// World-from-base pose as first received from the frontend; stays
    /// consistent with the landmark positions recorded at insertion.
    pub odometry_pose: RigidTransform,
    pub observations: Vec<GlobalObservation>,
    pub features: Vec<(LandmarkId, PatchFeature)>,
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalLandmark {
    pub id: LandmarkId,
    /// World-frame position at insertion time.
    pub position: Vector3<f64>,
    pub external_id: Option<u64>,
}

/// Everything the frontend hands over when a keyframe is created.
#[derive(Debug, Clone)]
pub struct KeyframePayload {
    pub id: KeyframeId,
    pub timestamp: f64,
    /// Base-from-world frontend pose.
    pub pose: RigidTransform,
    /// Accumulated relative motion since the previous keyframe (pose of
    /// this keyframe expressed in the previous keyframe's frame).
    pub delta_from_prev: Option<RigidTransform>,
    pub landmarks: Vec<GlobalLandmark>,
    pub observations: Vec<GlobalObservation>,
    pub features: Vec<(LandmarkId, PatchFeature)>,
}

#[derive(Debug, Error)]
pub enum GlobalMapError {
    #[error("keyframe {id} is out of order (newest is {newest})")]
    OutOfOrder { id: KeyframeId, newest: KeyframeId },
}

#[derive(Debug, Clone, Default)]
pub struct GlobalMap {
    keyframes: Vec<GlobalKeyframe>,
    landmarks: BTreeMap<LandmarkId, GlobalLandmark>,
    edges: Vec<PoseGraphEdge>,
}

impl GlobalMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keyframes(&self) -> &[GlobalKeyframe] {
        &self.keyframes
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&GlobalKeyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn landmark(&self, id: LandmarkId) -> Option<&GlobalLandmark> {
        self.landmarks.get(&id)
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn edges(&self) -> &[PoseGraphEdge] {
        &self.edges
    }

    pub fn add_loop_edge(&mut self, edge: PoseGraphEdge) {
        self.edges.push(edge);
    }

    /// Appends a keyframe atomically: node, landmarks, observations, patch
    /// features, and the odometry edge from the previous keyframe. The new
    /// node's pose chains the (possibly loop-corrected) previous node with
    /// the frontend delta so the spatial index stays drift-corrected.
    pub fn integrate_keyframe(&mut self, payload: KeyframePayload) -> Result<(), GlobalMapError> {
        if let Some(last) = self.keyframes.last() {
            if payload.id <= last.id {
                return Err(GlobalMapError::OutOfOrder {
                    id: payload.id,
                    newest: last.id,
                });
            }
        }
        let odometry_pose = payload.pose.inverse();
        let world_pose = match (self.keyframes.last(), payload.delta_from_prev) {
            (Some(prev), Some(delta)) => prev.world_pose.compose(&delta),
            _ => odometry_pose,
        };
        if let (Some(prev), Some(delta)) = (self.keyframes.last(), payload.delta_from_prev) {
            self.edges.push(PoseGraphEdge::new(prev.id, payload.id, delta));
        }
        for lm in payload.landmarks {
            self.landmarks.entry(lm.id).or_insert(lm);
        }
        self.keyframes.push(GlobalKeyframe {
            id: payload.id,
            timestamp: payload.timestamp,
            world_pose,
            odometry_pose,
            observations: payload.observations,
            features: payload.features,
        });
        Ok(())
    }

    /// Keyframe ids whose world position lies within `radius` (inclusive)
    /// of `center`.
    pub fn query_nearby_poses(&self, center: &Vector3<f64>, radius: f64) -> Vec<KeyframeId> {
        let points: Vec<(u64, Vector3<f64>)> = self
            .keyframes
            .iter()
            .map(|k| (k.id, *k.world_pose.translation()))
            .collect();
        KdTree::build(&points).query_radius(center, radius)
    }

    /// Applies optimized node poses back onto the keyframes.
    pub fn apply_optimized_poses(&mut self, nodes: &[(KeyframeId, RigidTransform)]) {
        for (id, pose) in nodes {
            if let Some(kf) = self.keyframes.iter_mut().find(|k| k.id == *id) {
                kf.world_pose = *pose;
            }
        }
    }

    pub fn pose_graph_nodes(&self) -> Vec<(KeyframeId, RigidTransform)> {
        self.keyframes
            .iter()
            .map(|k| (k.id, k.world_pose))
            .collect()
    }

    /// Line-oriented text dump: `node id t tx ty tz qx qy qz qw` per
    /// keyframe (world pose) and `edge i j tx ty tz qx qy qz qw` per edge.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        let fmt_pose = |p: &RigidTransform| {
            let t = p.translation();
            let q = p.rotation();
            format!(
                "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                t.x, t.y, t.z, q.i, q.j, q.k, q.w
            )
        };
        for kf in &self.keyframes {
            out.push_str(&format!(
                "node {} {:.6} {}\n",
                kf.id,
                kf.timestamp,
                fmt_pose(&kf.world_pose)
            ));
        }
        for e in &self.edges {
            out.push_str(&format!("edge {} {} {}\n", e.from, e.to, fmt_pose(&e.delta)));
        }
        out
    }

    /// Structural integrity check, used by the randomized insertion tests.
    pub fn validate(&self) -> Result<(), String> {
        for pair in self.keyframes.windows(2) {
            if pair[0].id >= pair[1].id {
                return Err("keyframe ids not strictly increasing".into());
            }
        }
        let ids: std::collections::BTreeSet<KeyframeId> =
            self.keyframes.iter().map(|k| k.id).collect();
        for e in &self.edges {
            if !ids.contains(&e.from) || !ids.contains(&e.to) {
                return Err(format!("edge {} -> {} references missing node", e.from, e.to));
            }
        }
        for kf in &self.keyframes {
            for obs in &kf.observations {
                if !self.landmarks.contains_key(&obs.landmark) {
                    return Err(format!(
                        "keyframe {} observes missing landmark {}",
                        kf.id, obs.landmark
                    ));
                }
            }
            for (lm, _) in &kf.features {
                if !self.landmarks.contains_key(lm) {
                    return Err(format!(
                        "keyframe {} carries a feature for missing landmark {lm}",
                        kf.id
                    ));
                }
            }
        }
        // Consecutive keyframes must be chained by an odometry edge.
        for pair in self.keyframes.windows(2) {
            let found = self
                .edges
                .iter()
                .any(|e| e.from == pair[0].id && e.to == pair[1].id);
            if !found {
                return Err(format!(
                    "missing odometry edge {} -> {}",
                    pair[0].id, pair[1].id
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn payload(id: KeyframeId, pose: RigidTransform, delta: Option<RigidTransform>) -> KeyframePayload {
        KeyframePayload {
            id,
            timestamp: id as f64 * 0.5,
            pose,
            delta_from_prev: delta,
            landmarks: vec![GlobalLandmark {
                id: 1000 + id,
                position: Vector3::new(0.0, 0.0, 2.0),
                external_id: None,
            }],
            observations: vec![GlobalObservation {
                landmark: 1000 + id,
                camera: 0,
                pixel: Vector2::new(320.0, 240.0),
                external_id: None,
            }],
            features: Vec::new(),
        }
    }

    #[test]
    fn first_keyframe_has_no_edges() {
        let mut map = GlobalMap::new();
        map.integrate_keyframe(payload(0, RigidTransform::identity(), None))
            .unwrap();
        assert_eq!(map.keyframes().len(), 1);
        assert!(map.edges().is_empty());
        map.validate().unwrap();
    }

    #[test]
    fn delta_edge_composes_to_the_next_pose() {
        let mut map = GlobalMap::new();
        let delta = se3_exp(&Twist::new(
            Vector3::new(0.0, 0.0, 0.1),
            Vector3::new(1.0, 0.0, 0.0),
        ));
        map.integrate_keyframe(payload(0, RigidTransform::identity(), None))
            .unwrap();
        // Frontend pose of keyframe 1: base-from-world of (node0 ∘ delta).
        let world1 = map.keyframes()[0].world_pose.compose(&delta);
        map.integrate_keyframe(payload(1, world1.inverse(), Some(delta)))
            .unwrap();
        assert_eq!(map.edges().len(), 1);
        let n0 = map.keyframes()[0].world_pose;
        let n1 = map.keyframes()[1].world_pose;
        assert!(n0.compose(&delta).max_abs_diff(&n1) < 1e-12);
        map.validate().unwrap();
    }

    #[test]
    fn out_of_order_ids_are_rejected() {
        let mut map = GlobalMap::new();
        map.integrate_keyframe(payload(5, RigidTransform::identity(), None))
            .unwrap();
        assert!(matches!(
            map.integrate_keyframe(payload(5, RigidTransform::identity(), None)),
            Err(GlobalMapError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn randomized_insertions_keep_invariants() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut map = GlobalMap::new();
        let mut pose = RigidTransform::identity();
        for id in 0..100u64 {
            let delta = se3_exp(&Twist::new(
                Vector3::new(0.0, 0.0, rng.random_range(-0.2..0.2)),
                Vector3::new(rng.random_range(0.0..0.5), 0.0, 0.0),
            ));
            pose = pose.compose(&delta);
            let d = if id == 0 { None } else { Some(delta) };
            map.integrate_keyframe(payload(id, pose.inverse(), d)).unwrap();
            map.validate().unwrap();
        }
        assert_eq!(map.keyframes().len(), 100);
        assert_eq!(map.edges().len(), 99);
    }

    #[test]
    fn nearby_query_matches_distances() {
        let mut map = GlobalMap::new();
        let mut prev: Option<RigidTransform> = None;
        for (id, x) in [(0u64, 1.0), (1, 2.0), (2, 3.0)] {
            // World position (x, 0, 0): base-from-world translation is -x.
            let world = RigidTransform::from_parts(
                nalgebra::UnitQuaternion::identity(),
                Vector3::new(x, 0.0, 0.0),
            );
            let delta = prev.map(|p: RigidTransform| p.inverse().compose(&world));
            map.integrate_keyframe(payload(id, world.inverse(), delta))
                .unwrap();
            prev = Some(world);
        }
        map.validate().unwrap();
        assert_eq!(map.query_nearby_poses(&Vector3::zeros(), 2.0), vec![0, 1]);
        assert!(map
            .query_nearby_poses(&Vector3::new(100.0, 0.0, 0.0), 1.0)
            .is_empty());
        assert!(GlobalMap::new()
            .query_nearby_poses(&Vector3::zeros(), 5.0)
            .is_empty());
    }
}
