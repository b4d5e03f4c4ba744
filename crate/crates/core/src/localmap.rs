//! Sliding-window odometry map: keyframes, landmarks, observations.
//!
//! Single writer. The optimizers work on a [`MapSnapshot`] taken from the
//! live map and the writer merges refined values back by id, last write
//! wins, so an asynchronous bundle adjustment never blocks tracking.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{CameraModel, CameraRig, RigidTransform};

pub type KeyframeId = u64;
pub type LandmarkId = u64;
pub type TrackId = u64;

/// Minimum triangulation angle between observing rays, radians (0.5 deg).
pub const MIN_TRIANGULATION_ANGLE: f64 = 0.5 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub timestamp: f64,
    /// Base-from-world transform.
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub id: LandmarkId,
    /// World-frame position.
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub landmark: LandmarkId,
    pub keyframe: KeyframeId,
    pub camera: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("keyframe id {id} is not greater than the newest keyframe")]
    NonMonotonicKeyframe { id: KeyframeId },
    #[error("landmark {id} already exists")]
    DuplicateLandmark { id: LandmarkId },
    #[error("observation references unknown landmark {id}")]
    UnknownLandmark { id: LandmarkId },
    #[error("observation references keyframe {id} not being inserted")]
    WrongKeyframe { id: KeyframeId },
    #[error("camera index {index} out of range for rig of size {size}")]
    BadCameraIndex { index: usize, size: usize },
    #[error("observation pixel ({x}, {y}) outside camera bounds")]
    PixelOutOfBounds { x: f64, y: f64 },
    #[error("new landmark {id} needs at least two observations, got {count}")]
    TooFewObservations { id: LandmarkId, count: usize },
}

#[derive(Debug, Error)]
pub enum TriangulationError {
    #[error("need at least two rays, got {count}")]
    TooFewRays { count: usize },
    #[error("degenerate geometry: rays are parallel or share a center")]
    DegenerateGeometry,
    #[error("triangulated point is behind an observing camera")]
    BehindCamera,
}

/// One observing ray for triangulation. The transform maps world points
/// directly into this camera's frame (rig extrinsic already composed in).
#[derive(Debug, Clone, Copy)]
pub struct TriangulationRay {
    pub camera_from_world: RigidTransform,
    pub model: CameraModel,
    pub pixel: Vector2<f64>,
}

/// Triangulates a world point from two or more rays: linear DLT solve, one
/// Gauss-Newton reprojection refinement, then parallax and cheirality gates.
pub fn triangulate(rays: &[TriangulationRay]) -> Result<Vector3<f64>, TriangulationError> {
    if rays.len() < 2 {
        return Err(TriangulationError::TooFewRays { count: rays.len() });
    }

    // Camera centers in world coordinates.
    let centers: Vec<Vector3<f64>> = rays
        .iter()
        .map(|r| {
            r.camera_from_world
                .inverse()
                .transform_point(&Vector3::zeros())
        })
        .collect();
    let mut distinct = false;
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            if (centers[i] - centers[j]).norm() > 1e-9 {
                distinct = true;
            }
        }
    }
    if !distinct {
        return Err(TriangulationError::DegenerateGeometry);
    }

    // DLT on normalized image coordinates.
    let mut a = DMatrix::zeros(2 * rays.len(), 4);
    for (i, ray) in rays.iter().enumerate() {
        let xn = (ray.pixel.x - ray.model.cx) / ray.model.fx;
        let yn = (ray.pixel.y - ray.model.cy) / ray.model.fy;
        let r = ray.camera_from_world.rotation_matrix();
        let t = ray.camera_from_world.translation();
        let row = |k: usize| [r[(k, 0)], r[(k, 1)], r[(k, 2)], t[k]];
        let (r0, r1, r2) = (row(0), row(1), row(2));
        for c in 0..4 {
            a[(2 * i, c)] = xn * r2[c] - r0[c];
            a[(2 * i + 1, c)] = yn * r2[c] - r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(TriangulationError::DegenerateGeometry)?;
    let h = v_t.row(3);
    if h[3].abs() < 1e-12 {
        return Err(TriangulationError::DegenerateGeometry);
    }
    let mut point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    // One Gauss-Newton step on the reprojection error.
    let mut hmat = Matrix3::zeros();
    let mut g = Vector3::zeros();
    for ray in rays {
        let cam = ray.camera_from_world.transform_point(&point);
        if cam.z <= 1e-9 {
            return Err(TriangulationError::BehindCamera);
        }
        let px = ray.model.project(&cam).map_err(|_| TriangulationError::BehindCamera)?;
        let jac = ray.model.project_jacobian(&cam) * ray.camera_from_world.rotation_matrix();
        let res = px - ray.pixel;
        hmat += jac.transpose() * jac;
        g += jac.transpose() * res;
    }
    if let Some(step) = (-hmat).try_inverse().map(|inv| inv * g) {
        if step.iter().all(|x| x.is_finite()) {
            point += step;
        }
    }

    // Parallax gate: widest angle between observing rays.
    let mut max_angle = 0.0f64;
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            let di = (point - centers[i]).normalize();
            let dj = (point - centers[j]).normalize();
            max_angle = max_angle.max(di.dot(&dj).clamp(-1.0, 1.0).acos());
        }
    }
    if max_angle < MIN_TRIANGULATION_ANGLE {
        return Err(TriangulationError::DegenerateGeometry);
    }

    for ray in rays {
        if ray.camera_from_world.transform_point(&point).z <= 0.0 {
            return Err(TriangulationError::BehindCamera);
        }
    }
    Ok(point)
}

/// Immutable view handed to the bundle adjusters.
#[derive(Debug, Clone)]
pub struct MapSnapshot {
    pub keyframes: Vec<Keyframe>,
    pub landmarks: Vec<Landmark>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone)]
pub struct LocalMap {
    capacity: usize,
    rig: CameraRig,
    keyframes: VecDeque<Keyframe>,
    landmarks: BTreeMap<LandmarkId, Landmark>,
    /// Observations per landmark, ordered by (keyframe, camera).
    observations: BTreeMap<LandmarkId, Vec<Observation>>,
    /// Live link from frontend track to landmark.
    track_links: BTreeMap<TrackId, LandmarkId>,
}

impl LocalMap {
    pub fn new(capacity: usize, rig: CameraRig) -> Self {
        assert!(capacity >= 1);
        Self {
            capacity,
            rig,
            keyframes: VecDeque::new(),
            landmarks: BTreeMap::new(),
            observations: BTreeMap::new(),
            track_links: BTreeMap::new(),
        }
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.iter()
    }

    pub fn newest_keyframe(&self) -> Option<&Keyframe> {
        self.keyframes.back()
    }

    pub fn oldest_keyframe(&self) -> Option<&Keyframe> {
        self.keyframes.front()
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn num_keyframes(&self) -> usize {
        self.keyframes.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn landmark(&self, id: LandmarkId) -> Option<&Landmark> {
        self.landmarks.get(&id)
    }

    pub fn observations_of(&self, id: LandmarkId) -> &[Observation] {
        self.observations.get(&id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn link_track(&mut self, track: TrackId, landmark: LandmarkId) {
        self.track_links.insert(track, landmark);
    }

    pub fn unlink_track(&mut self, track: TrackId) {
        self.track_links.remove(&track);
    }

    pub fn landmark_for_track(&self, track: TrackId) -> Option<LandmarkId> {
        let id = *self.track_links.get(&track)?;
        self.landmarks.contains_key(&id).then_some(id)
    }

    fn validate_observation(&self, obs: &Observation) -> Result<(), MapError> {
        if obs.camera >= self.rig.len() {
            return Err(MapError::BadCameraIndex {
                index: obs.camera,
                size: self.rig.len(),
            });
        }
        let model = &self.rig.camera(obs.camera).model;
        if !model.contains(&obs.pixel, 0.0) {
            return Err(MapError::PixelOutOfBounds {
                x: obs.pixel.x,
                y: obs.pixel.y,
            });
        }
        Ok(())
    }

    /// Inserts a keyframe together with newly created landmarks and all
    /// observations collected at this keyframe (for both new and existing
    /// landmarks), then trims the window to capacity.
    pub fn insert_keyframe(
        &mut self,
        keyframe: Keyframe,
        new_landmarks: Vec<Landmark>,
        observations: Vec<Observation>,
    ) -> Result<(), MapError> {
        if let Some(last) = self.keyframes.back() {
            if keyframe.id <= last.id {
                return Err(MapError::NonMonotonicKeyframe { id: keyframe.id });
            }
        }
        for lm in &new_landmarks {
            if self.landmarks.contains_key(&lm.id) {
                return Err(MapError::DuplicateLandmark { id: lm.id });
            }
        }
        let mut new_counts: BTreeMap<LandmarkId, usize> = BTreeMap::new();
        for obs in &observations {
            self.validate_observation(obs)?;
            // Observations may reference this keyframe or (for landmarks
            // triangulated across keyframes) any keyframe still in the
            // window.
            if obs.keyframe != keyframe.id && self.keyframe(obs.keyframe).is_none() {
                return Err(MapError::WrongKeyframe { id: obs.keyframe });
            }
            let known = self.landmarks.contains_key(&obs.landmark)
                || new_landmarks.iter().any(|l| l.id == obs.landmark);
            if !known {
                return Err(MapError::UnknownLandmark { id: obs.landmark });
            }
            *new_counts.entry(obs.landmark).or_insert(0) += 1;
        }
        for lm in &new_landmarks {
            let count = new_counts.get(&lm.id).copied().unwrap_or(0);
            if count < 2 {
                return Err(MapError::TooFewObservations { id: lm.id, count });
            }
        }

        self.keyframes.push_back(keyframe);
        for lm in new_landmarks {
            self.landmarks.insert(lm.id, lm);
            self.observations.entry(lm.id).or_default();
        }
        for obs in observations {
            self.observations.entry(obs.landmark).or_default().push(obs);
        }

        while self.keyframes.len() > self.capacity {
            let dropped = self.keyframes.pop_front().expect("non-empty");
            self.drop_keyframe_observations(dropped.id);
        }
        Ok(())
    }

    fn drop_keyframe_observations(&mut self, keyframe: KeyframeId) {
        let mut dead = Vec::new();
        for (id, obs) in self.observations.iter_mut() {
            obs.retain(|o| o.keyframe != keyframe);
            if obs.len() < 2 {
                dead.push(*id);
            }
        }
        for id in dead {
            self.landmarks.remove(&id);
            self.observations.remove(&id);
        }
        self.track_links
            .retain(|_, lm| self.landmarks.contains_key(lm));
    }

    /// Landmarks linked to the given (live) tracks, paired with the latest
    /// observation of each, ordered by landmark id. Unknown ids are skipped.
    pub fn landmarks_for_tracks(&self, tracks: &[TrackId]) -> Vec<(Landmark, Observation)> {
        let mut ids: Vec<LandmarkId> = tracks
            .iter()
            .filter_map(|t| self.track_links.get(t).copied())
            .filter(|id| self.landmarks.contains_key(id))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter_map(|id| {
                let lm = self.landmarks.get(&id)?;
                let obs = self.observations.get(&id)?;
                let latest = obs
                    .iter()
                    .max_by(|a, b| (a.keyframe, a.camera).cmp(&(b.keyframe, b.camera)))?;
                Some((*lm, *latest))
            })
            .collect()
    }

    pub fn snapshot(&self) -> MapSnapshot {
        let mut observations = Vec::new();
        for obs in self.observations.values() {
            observations.extend_from_slice(obs);
        }
        MapSnapshot {
            keyframes: self.keyframes.iter().copied().collect(),
            landmarks: self.landmarks.values().copied().collect(),
            observations,
        }
    }

    /// Merges refined values back from an optimization run. Entries whose id
    /// has since left the window are ignored.
    pub fn merge_refined(
        &mut self,
        poses: &[(KeyframeId, RigidTransform)],
        landmarks: &[(LandmarkId, Vector3<f64>)],
    ) {
        for (id, pose) in poses {
            if let Some(kf) = self.keyframes.iter_mut().find(|k| k.id == *id) {
                kf.pose = *pose;
            }
        }
        for (id, pos) in landmarks {
            if let Some(lm) = self.landmarks.get_mut(id) {
                lm.position = *pos;
            }
        }
    }

    /// Checks referential integrity and the window invariants. Test support.
    pub fn validate(&self) -> Result<(), String> {
        if self.keyframes.len() > self.capacity {
            return Err(format!(
                "window holds {} keyframes, capacity {}",
                self.keyframes.len(),
                self.capacity
            ));
        }
        for w in self.keyframes.iter().zip(self.keyframes.iter().skip(1)) {
            if w.0.id >= w.1.id {
                return Err("keyframe ids are not strictly increasing".into());
            }
        }
        for (id, obs) in &self.observations {
            if !self.landmarks.contains_key(id) {
                return Err(format!("observations for missing landmark {id}"));
            }
            if obs.len() < 2 {
                return Err(format!("landmark {id} has {} observations", obs.len()));
            }
            for o in obs {
                if self.keyframe(o.keyframe).is_none() {
                    return Err(format!(
                        "observation of landmark {id} references dropped keyframe {}",
                        o.keyframe
                    ));
                }
                if o.camera >= self.rig.len() {
                    return Err("camera index out of range".into());
                }
            }
        }
        for id in self.landmarks.keys() {
            if !self.observations.contains_key(id) {
                return Err(format!("landmark {id} has no observation list"));
            }
        }
        for lm in self.track_links.values() {
            if !self.landmarks.contains_key(lm) {
                return Err("track link to missing landmark".into());
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

    fn test_rig() -> CameraRig {
        let model = CameraModel::new(400.0, 400.0, 320.0, 240.0, 640, 480);
        let right = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(-0.1, 0.0, 0.0)));
        CameraRig::new(vec![
            crate::geometry::RigCamera {
                model,
                extrinsic: RigidTransform::identity(),
            },
            crate::geometry::RigCamera {
                model,
                extrinsic: right,
            },
        ])
    }

    fn stereo_rays(point: &Vector3<f64>, rig: &CameraRig, pose: &RigidTransform) -> Vec<TriangulationRay> {
        rig.cameras()
            .iter()
            .map(|cam| {
                let cw = cam.extrinsic.compose(pose);
                let px = cam.model.project(&cw.transform_point(point)).unwrap();
                TriangulationRay {
                    camera_from_world: cw,
                    model: cam.model,
                    pixel: px,
                }
            })
            .collect()
    }

    #[test]
    fn triangulation_recovers_a_constructed_point() {
        let rig = test_rig();
        let pose = RigidTransform::identity();
        let truth = Vector3::new(0.3, -0.1, 2.0);
        let rays = stereo_rays(&truth, &rig, &pose);
        let got = triangulate(&rays).unwrap();
        assert!((got - truth).norm() < 1e-9, "error {}", (got - truth).norm());
    }

    #[test]
    fn identical_centers_are_degenerate() {
        let model = CameraModel::new(400.0, 400.0, 320.0, 240.0, 640, 480);
        let ray = |px: Vector2<f64>| TriangulationRay {
            camera_from_world: RigidTransform::identity(),
            model,
            pixel: px,
        };
        let res = triangulate(&[ray(Vector2::new(300.0, 240.0)), ray(Vector2::new(340.0, 240.0))]);
        assert!(matches!(res, Err(TriangulationError::DegenerateGeometry)));
    }

    #[test]
    fn point_behind_a_camera_is_rejected() {
        let rig = test_rig();
        // Second view rotated 180 degrees so the point sits behind it.
        let flipped = se3_exp(&Twist::new(
            Vector3::new(0.0, std::f64::consts::PI * 0.999, 0.0),
            Vector3::new(0.0, 0.0, 4.0),
        ));
        let truth = Vector3::new(0.05, 0.0, 2.0);
        let cam = rig.camera(0);
        let front = TriangulationRay {
            camera_from_world: cam.extrinsic.compose(&RigidTransform::identity()),
            model: cam.model,
            pixel: cam.model.project(&truth).unwrap(),
        };
        // Fabricate a pixel in the flipped camera: the true point is behind
        // it, so use the projection of its mirror image to build the ray.
        let mirrored = flipped.inverse().transform_point(&Vector3::new(0.05, 0.0, 1.0));
        let behind_px = cam.model.project(&flipped.transform_point(&mirrored).abs()).unwrap();
        let back = TriangulationRay {
            camera_from_world: flipped,
            model: cam.model,
            pixel: behind_px,
        };
        let res = triangulate(&[front, back]);
        assert!(res.is_err());
    }

    fn obs(lm: LandmarkId, kf: KeyframeId, camera: usize) -> Observation {
        Observation {
            landmark: lm,
            keyframe: kf,
            camera,
            pixel: Vector2::new(320.0, 240.0),
        }
    }

    #[test]
    fn window_trims_to_capacity() {
        let mut map = LocalMap::new(5, test_rig());
        for i in 0..6u64 {
            map.insert_keyframe(
                Keyframe {
                    id: i,
                    timestamp: i as f64,
                    pose: RigidTransform::identity(),
                },
                vec![Landmark {
                    id: 100 + i,
                    position: Vector3::new(0.0, 0.0, 2.0),
                }],
                vec![obs(100 + i, i, 0), obs(100 + i, i, 1)],
            )
            .unwrap();
        }
        assert_eq!(map.num_keyframes(), 5);
        assert_eq!(map.oldest_keyframe().unwrap().id, 1);
        // Landmark observed only in the dropped keyframe is gone.
        assert!(map.landmark(100).is_none());
        map.validate().unwrap();
    }

    #[test]
    fn duplicate_or_stale_keyframe_id_is_rejected() {
        let mut map = LocalMap::new(5, test_rig());
        map.insert_keyframe(
            Keyframe {
                id: 3,
                timestamp: 0.0,
                pose: RigidTransform::identity(),
            },
            vec![],
            vec![],
        )
        .unwrap();
        let err = map.insert_keyframe(
            Keyframe {
                id: 3,
                timestamp: 1.0,
                pose: RigidTransform::identity(),
            },
            vec![],
            vec![],
        );
        assert!(matches!(err, Err(MapError::NonMonotonicKeyframe { .. })));
    }

    #[test]
    fn landmarks_for_tracks_filters_and_sorts() {
        let mut map = LocalMap::new(5, test_rig());
        map.insert_keyframe(
            Keyframe {
                id: 0,
                timestamp: 0.0,
                pose: RigidTransform::identity(),
            },
            vec![
                Landmark {
                    id: 11,
                    position: Vector3::new(0.0, 0.0, 2.0),
                },
                Landmark {
                    id: 7,
                    position: Vector3::new(0.1, 0.0, 2.0),
                },
            ],
            vec![obs(11, 0, 0), obs(11, 0, 1), obs(7, 0, 0), obs(7, 0, 1)],
        )
        .unwrap();
        map.link_track(1, 11);
        map.link_track(2, 7);
        map.link_track(3, 999); // dangling on purpose

        assert!(map.landmarks_for_tracks(&[]).is_empty());
        let pairs = map.landmarks_for_tracks(&[1, 2, 3, 4]);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0.id, 7);
        assert_eq!(pairs[1].0.id, 11);
    }

    #[test]
    fn randomized_insertions_keep_invariants() {
        let mut rng = StdRng::seed_from_u64(99);
        let mut map = LocalMap::new(4, test_rig());
        let mut next_lm: LandmarkId = 0;
        for kf in 0..100u64 {
            let mut landmarks = Vec::new();
            let mut observations = Vec::new();
            // New landmarks at this keyframe, stereo-observed.
            for _ in 0..rng.random_range(1..5) {
                let id = next_lm;
                next_lm += 1;
                landmarks.push(Landmark {
                    id,
                    position: Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(1.0..5.0),
                    ),
                });
                observations.push(obs(id, kf, 0));
                observations.push(obs(id, kf, 1));
            }
            // Re-observe some surviving landmarks.
            let existing: Vec<LandmarkId> = map.landmarks.keys().copied().collect();
            for id in existing.iter().take(3) {
                observations.push(obs(*id, kf, 0));
            }
            map.insert_keyframe(
                Keyframe {
                    id: kf,
                    timestamp: kf as f64 * 0.1,
                    pose: RigidTransform::identity(),
                },
                landmarks,
                observations,
            )
            .unwrap();
            map.validate().unwrap();
        }
    }

    #[test]
    fn merge_refined_is_last_write_wins() {
        let mut map = LocalMap::new(5, test_rig());
        map.insert_keyframe(
            Keyframe {
                id: 0,
                timestamp: 0.0,
                pose: RigidTransform::identity(),
            },
            vec![Landmark {
                id: 1,
                position: Vector3::new(0.0, 0.0, 2.0),
            }],
            vec![obs(1, 0, 0), obs(1, 0, 1)],
        )
        .unwrap();
        let refined = Vector3::new(0.5, 0.5, 2.5);
        map.merge_refined(&[], &[(1, refined), (42, refined)]);
        assert_eq!(map.landmark(1).unwrap().position, refined);
        map.validate().unwrap();
    }
}
