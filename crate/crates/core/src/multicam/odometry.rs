//! The shared sparse odometry engine.
//!
//! One frame in, one pose out: temporal tracking on the FIG source cameras,
//! a rig-wide PnP solve on the mapped landmarks, the union survival check,
//! and on keyframes the full selection / cross-camera tracking /
//! triangulation / map insertion cycle. Stereo mode is the single-pair
//! special case; multi-stereo and the visual stage of stereo-inertial run
//! the same code with more cameras; mono runs it with an externally
//! injected bootstrap.
//!
//! Frames either carry real images (pyramids are built and Lucas-Kanade
//! runs) or exact keypoint observations keyed by a source-assigned identity
//! (synthetic streams), in which case data association is given and the
//! estimator stack is exercised unchanged.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::backend::{
    extract_patch_feature, GlobalLandmark, GlobalObservation, KeyframePayload, LoopQueryData,
};
use crate::frontend2d::{
    build_pyramid, keyframe_due, select_features, track_feature, FeatureGridConfig, GrayImage,
    ImagePyramid, KeyframePolicy, LkOutcome, LkParams, Track,
};
use crate::geometry::{CameraRig, RigidTransform};
use crate::localmap::{
    triangulate, Keyframe, KeyframeId, Landmark, LandmarkId, LocalMap, MapSnapshot, Observation,
    TrackId, TriangulationRay,
};
use crate::solvers::{solve_pnp, PnpConfig, PnpObservation, SolverError};

use super::fig::{build_frustum_graph, FigConfig, FrustumGraph};

/// Content of one camera slot in a synchronized frame bundle.
#[derive(Debug, Clone)]
pub enum CameraFrameData {
    /// Real intensity image; tracking runs Lucas-Kanade.
    Image(GrayImage),
    /// Exact keypoint observations `(external id, pixel)` from a synthetic
    /// source; association is by identity.
    Observations(Vec<(u64, Vector2<f64>)>),
    /// Camera occluded or dropped this frame.
    Missing,
}

/// A synchronized multi-camera frame.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub timestamp: f64,
    pub cameras: Vec<CameraFrameData>,
    /// Per-camera capture timestamps when the source distinguishes them.
    pub camera_timestamps: Option<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("camera {camera} timestamp {got} deviates from bundle time {expected}")]
    Synchronization {
        camera: usize,
        got: f64,
        expected: f64,
    },
    #[error("pose solve failed: {0}")]
    Pnp(#[from] SolverError),
}

#[derive(Debug, Clone)]
pub struct OdometryConfig {
    pub window: usize,
    pub pyramid_levels: usize,
    pub lk: LkParams,
    pub features: FeatureGridConfig,
    pub keyframe: KeyframePolicy,
    pub pnp: PnpConfig,
    pub fig: FigConfig,
    pub sync_tolerance: f64,
    /// Collect 9x9 patch features for the backend when images are present.
    pub collect_patches: bool,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            window: 10,
            pyramid_levels: 4,
            lk: LkParams::default(),
            features: FeatureGridConfig::default(),
            keyframe: KeyframePolicy::default(),
            pnp: PnpConfig::default(),
            fig: FigConfig::default(),
            sync_tolerance: 1e-4,
            collect_patches: true,
        }
    }
}

/// What happened on this frame.
#[derive(Debug, Clone)]
pub enum StepStatus {
    /// Pose solved from mapped landmarks.
    Tracking { inliers: usize },
    /// Not enough mapped landmarks yet (monocular pre-bootstrap).
    AwaitingInit,
    /// The pose solve failed; the engine held the predicted pose and will
    /// force a keyframe attempt on the next frame.
    Lost,
}

/// Data emitted when a keyframe is created.
pub struct KeyframeEvent {
    pub payload: KeyframePayload,
    pub query: LoopQueryData,
    /// Map snapshot for the asynchronous bundle adjustment.
    pub snapshot: MapSnapshot,
}

pub struct StepOutput {
    /// Base-from-world pose of this frame.
    pub pose: RigidTransform,
    pub status: StepStatus,
    pub keyframe: Option<KeyframeEvent>,
}

/// Engine-internal per-camera frame state.
enum CameraState {
    Pyramid(ImagePyramid),
    Observations(BTreeMap<u64, Vector2<f64>>),
    Missing,
}

pub struct SparseOdometry {
    rig: CameraRig,
    fig: FrustumGraph,
    config: OdometryConfig,
    map: LocalMap,
    tracks: Vec<Track>,
    /// Source-assigned identity per track (observation mode).
    external_ids: BTreeMap<TrackId, u64>,
    /// Claimed external ids (live tracks), to avoid duplicate adoption.
    claimed: BTreeSet<u64>,
    /// Per-track observation history at keyframes: (keyframe, camera, px).
    history: BTreeMap<TrackId, Vec<(KeyframeId, usize, Vector2<f64>)>>,
    prev_frames: Vec<CameraState>,
    pose: RigidTransform,
    prev_pose: Option<RigidTransform>,
    last_kf_pose: RigidTransform,
    kf_set: BTreeSet<TrackId>,
    force_keyframe: bool,
    bootstrapped: bool,
    next_track: TrackId,
    next_landmark: LandmarkId,
    next_keyframe: KeyframeId,
}

impl SparseOdometry {
    pub fn new(rig: CameraRig, config: OdometryConfig) -> Self {
        let fig = build_frustum_graph(&rig, &config.fig);
        let map = LocalMap::new(config.window, rig.clone());
        Self {
            rig,
            fig,
            config,
            map,
            tracks: Vec::new(),
            external_ids: BTreeMap::new(),
            claimed: BTreeSet::new(),
            history: BTreeMap::new(),
            prev_frames: Vec::new(),
            pose: RigidTransform::identity(),
            prev_pose: None,
            last_kf_pose: RigidTransform::identity(),
            kf_set: BTreeSet::new(),
            force_keyframe: false,
            bootstrapped: false,
            next_track: 0,
            next_landmark: 0,
            next_keyframe: 0,
        }
    }

    pub fn fig(&self) -> &FrustumGraph {
        &self.fig
    }

    pub fn map(&self) -> &LocalMap {
        &self.map
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn current_pose(&self) -> RigidTransform {
        self.pose
    }

    pub fn set_pose(&mut self, pose: RigidTransform) {
        self.pose = pose;
    }

    /// Keyframe observation history of one track (monocular bootstrap).
    pub fn track_history(&self, id: TrackId) -> &[(KeyframeId, usize, Vector2<f64>)] {
        self.history.get(&id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn merge_refined(
        &mut self,
        poses: &[(KeyframeId, RigidTransform)],
        landmarks: &[(LandmarkId, Vector3<f64>)],
    ) {
        self.map.merge_refined(poses, landmarks);
    }

    fn ingest(&self, input: &FrameInput) -> Result<Vec<CameraState>, StepError> {
        if let Some(stamps) = &input.camera_timestamps {
            for (camera, t) in stamps.iter().enumerate() {
                if (t - input.timestamp).abs() > self.config.sync_tolerance {
                    return Err(StepError::Synchronization {
                        camera,
                        got: *t,
                        expected: input.timestamp,
                    });
                }
            }
        }
        let mut states = Vec::with_capacity(input.cameras.len());
        for data in &input.cameras {
            states.push(match data {
                CameraFrameData::Image(img) => CameraState::Pyramid(
                    build_pyramid(img.clone(), self.config.pyramid_levels)
                        .expect("frame large enough for the configured pyramid"),
                ),
                CameraFrameData::Observations(list) => {
                    CameraState::Observations(list.iter().copied().collect())
                }
                CameraFrameData::Missing => CameraState::Missing,
            });
        }
        Ok(states)
    }

    fn predicted_pose(&self) -> RigidTransform {
        match self.prev_pose {
            Some(prev) => {
                // Constant velocity in the world frame.
                let n_last = self.pose.inverse();
                let n_prev = prev.inverse();
                let step = n_prev.inverse().compose(&n_last);
                n_last.compose(&step).inverse()
            }
            None => self.pose,
        }
    }

    /// Advances live tracks of the source cameras into the new frame.
    fn temporal_tracking(&mut self, frames: &[CameraState]) {
        let sources = self.fig.source_cameras();
        for track in self.tracks.iter_mut().filter(|t| t.is_live()) {
            if !sources.contains(&track.camera) {
                continue;
            }
            match (&frames[track.camera], &self.prev_frames[track.camera]) {
                (CameraState::Pyramid(curr), CameraState::Pyramid(prev)) => {
                    match track_feature(prev, curr, track.position(), None, &self.config.lk) {
                        LkOutcome::Converged { position, .. } => track.advance(position),
                        LkOutcome::Lost(_) => track.mark_lost(),
                    }
                }
                (CameraState::Observations(obs), _) => {
                    let external = self.external_ids.get(&track.id);
                    match external.and_then(|e| obs.get(e)) {
                        Some(px) => track.advance(*px),
                        None => track.mark_lost(),
                    }
                }
                _ => track.mark_lost(),
            }
        }
        for track in self.tracks.iter().filter(|t| !t.is_live()) {
            if let Some(e) = self.external_ids.get(&track.id) {
                self.claimed.remove(e);
            }
        }
    }

    fn live_set(&self) -> BTreeSet<TrackId> {
        self.tracks
            .iter()
            .filter(|t| t.is_live())
            .map(|t| t.id)
            .collect()
    }

    fn pnp_observations(&self) -> Vec<PnpObservation> {
        let mut out = Vec::new();
        for track in self.tracks.iter().filter(|t| t.is_live()) {
            let Some(lm_id) = self.map.landmark_for_track(track.id) else {
                continue;
            };
            let Some(lm) = self.map.landmark(lm_id) else { continue };
            out.push(PnpObservation {
                point: lm.position,
                camera: track.camera,
                pixel: track.position(),
            });
        }
        out
    }

    /// Spawns new tracks in a source camera: corner selection on images,
    /// adoption of unclaimed identities on observation streams.
    fn select_new_tracks(&mut self, camera: usize, frame: &CameraState) {
        match frame {
            CameraState::Pyramid(pyr) => {
                let existing: Vec<Track> = self
                    .tracks
                    .iter()
                    .filter(|t| t.is_live() && t.camera == camera)
                    .cloned()
                    .collect();
                for px in select_features(pyr, &self.config.features, &existing) {
                    let id = self.next_track;
                    self.next_track += 1;
                    self.tracks.push(Track::new(id, camera, px));
                }
            }
            CameraState::Observations(obs) => {
                for (external, px) in obs {
                    if self.claimed.contains(external) {
                        continue;
                    }
                    let id = self.next_track;
                    self.next_track += 1;
                    self.tracks.push(Track::new(id, camera, *px));
                    self.external_ids.insert(id, *external);
                    self.claimed.insert(*external);
                }
            }
            CameraState::Missing => {}
        }
    }

    /// Cross-camera matches for a live track along the FIG edges of its
    /// camera: `(target camera, pixel)` pairs.
    fn cross_camera_matches(
        &self,
        track: &Track,
        frames: &[CameraState],
    ) -> Vec<(usize, Vector2<f64>)> {
        let mut out = Vec::new();
        for edge in self.fig.edges_from(track.camera) {
            match (&frames[track.camera], &frames[edge.to]) {
                (CameraState::Pyramid(src), CameraState::Pyramid(dst)) => {
                    if let LkOutcome::Converged { position, .. } =
                        track_feature(src, dst, track.position(), None, &self.config.lk)
                    {
                        out.push((edge.to, position));
                    }
                }
                (_, CameraState::Observations(obs)) => {
                    if let Some(e) = self.external_ids.get(&track.id) {
                        if let Some(px) = obs.get(e) {
                            out.push((edge.to, *px));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Runs the keyframe cycle at the current pose: feature selection,
    /// cross-camera tracking, triangulation, map insertion, and payload
    /// assembly for the backend.
    fn create_keyframe(&mut self, timestamp: f64, frames: &[CameraState]) -> KeyframeEvent {
        let kf_id = self.next_keyframe;
        self.next_keyframe += 1;

        let sources = self.fig.source_cameras();
        for camera in &sources {
            self.select_new_tracks(*camera, &frames[*camera]);
        }

        // Collect per-track observations at this keyframe: the track's own
        // position plus cross-camera matches.
        let mut kf_obs: BTreeMap<TrackId, Vec<(usize, Vector2<f64>)>> = BTreeMap::new();
        let live: Vec<TrackId> = self.live_set().into_iter().collect();
        for id in &live {
            let track = self.tracks.iter().find(|t| t.id == *id).expect("live");
            let mut obs = vec![(track.camera, track.position())];
            obs.extend(self.cross_camera_matches(track, frames));
            kf_obs.insert(*id, obs);
        }

        // Extend observation histories.
        for (id, obs) in &kf_obs {
            let entry = self.history.entry(*id).or_default();
            for (camera, px) in obs {
                entry.push((kf_id, *camera, *px));
            }
        }

        // Triangulate tracks that do not have a landmark yet, using every
        // recorded observation (cross-camera at this keyframe, or the same
        // camera across keyframes in the monocular case).
        let mut new_landmarks = Vec::new();
        let mut observations = Vec::new();
        let mut linked: Vec<(TrackId, LandmarkId)> = Vec::new();
        for id in &live {
            let existing = self.map.landmark_for_track(*id);
            if let Some(lm) = existing {
                for (camera, px) in &kf_obs[id] {
                    if self.rig.camera(*camera).model.contains(px, 0.0) {
                        observations.push(Observation {
                            landmark: lm,
                            keyframe: kf_id,
                            camera: *camera,
                            pixel: *px,
                        });
                    }
                }
                continue;
            }

            let mut rays = Vec::new();
            let mut ray_obs = Vec::new();
            for (obs_kf, camera, px) in self.history.get(id).into_iter().flatten() {
                let pose = if *obs_kf == kf_id {
                    Some(self.pose)
                } else {
                    self.map.keyframe(*obs_kf).map(|k| k.pose)
                };
                let Some(pose) = pose else { continue };
                let cam = self.rig.camera(*camera);
                if !cam.model.contains(px, 0.0) {
                    continue;
                }
                rays.push(TriangulationRay {
                    camera_from_world: cam.extrinsic.compose(&pose),
                    model: cam.model,
                    pixel: *px,
                });
                ray_obs.push((*obs_kf, *camera, *px));
            }
            if rays.len() < 2 {
                continue;
            }
            let Ok(position) = triangulate(&rays) else {
                continue;
            };
            let lm_id = self.next_landmark;
            self.next_landmark += 1;
            new_landmarks.push(Landmark {
                id: lm_id,
                position,
            });
            for (obs_kf, camera, px) in ray_obs {
                observations.push(Observation {
                    landmark: lm_id,
                    keyframe: obs_kf,
                    camera,
                    pixel: px,
                });
            }
            linked.push((*id, lm_id));
        }

        let inserted = self.map.insert_keyframe(
            Keyframe {
                id: kf_id,
                timestamp,
                pose: self.pose,
            },
            new_landmarks.clone(),
            observations.clone(),
        );
        debug_assert!(inserted.is_ok(), "keyframe insertion: {inserted:?}");
        for (track, lm) in &linked {
            self.map.link_track(*track, *lm);
        }

        // Backend payload: visible landmarks, observations at this
        // keyframe, patch features (image mode) or external identities.
        // Relative motion of this keyframe in the previous keyframe's
        // frame (world poses are the inverses of the stored transforms).
        let delta = self.last_kf_pose.compose(&self.pose.inverse());
        let delta_from_prev = if kf_id == 0 { None } else { Some(delta) };
        let mut payload_landmarks = Vec::new();
        let mut payload_obs = Vec::new();
        let mut features = Vec::new();
        let mut query_obs: Vec<(u64, usize, Vector2<f64>)> = Vec::new();
        let mut any_image = false;
        let mut pyramids = Vec::new();
        for f in frames {
            if let CameraState::Pyramid(p) = f {
                any_image = true;
                pyramids.push(p.clone());
            } else {
                pyramids.push(
                    build_pyramid(GrayImage::filled(8, 8, 0.0), 1).expect("placeholder"),
                );
            }
        }
        for id in &live {
            let Some(lm_id) = self.map.landmark_for_track(*id) else {
                continue;
            };
            let Some(lm) = self.map.landmark(lm_id) else { continue };
            let external = self.external_ids.get(id).copied();
            payload_landmarks.push(GlobalLandmark {
                id: lm_id,
                position: lm.position,
                external_id: external,
            });
            for (camera, px) in &kf_obs[id] {
                payload_obs.push(GlobalObservation {
                    landmark: lm_id,
                    camera: *camera,
                    pixel: *px,
                    external_id: external,
                });
                if let Some(e) = external {
                    query_obs.push((e, *camera, *px));
                }
                if any_image && self.config.collect_patches {
                    if let CameraState::Pyramid(pyr) = &frames[*camera] {
                        if let Some(f) = extract_patch_feature(pyr, *px, *camera) {
                            features.push((lm_id, f));
                        }
                    }
                }
            }
        }
        let query = if any_image {
            LoopQueryData::Images(pyramids)
        } else if !query_obs.is_empty() {
            LoopQueryData::Observations(query_obs)
        } else {
            LoopQueryData::None
        };

        self.kf_set = self.live_set();
        self.last_kf_pose = self.pose;
        self.force_keyframe = false;

        // Drop bookkeeping of dead tracks.
        let live_now = self.live_set();
        self.history.retain(|id, _| live_now.contains(id));
        self.external_ids.retain(|id, _| live_now.contains(id));
        self.tracks.retain(|t| t.is_live());

        KeyframeEvent {
            payload: KeyframePayload {
                id: kf_id,
                timestamp,
                pose: self.pose,
                delta_from_prev,
                landmarks: payload_landmarks,
                observations: payload_obs,
                features,
            },
            query,
            snapshot: self.map.snapshot(),
        }
    }

    /// Injects an externally computed bootstrap (monocular): sets the
    /// current pose and creates landmarks for the given tracks from their
    /// recorded keyframe observations plus the current frame positions.
    pub fn inject_bootstrap(
        &mut self,
        timestamp: f64,
        pose: RigidTransform,
        landmarks: Vec<(TrackId, Vector3<f64>)>,
    ) {
        self.pose = pose;
        let kf_id = self.next_keyframe;
        self.next_keyframe += 1;

        let mut new_landmarks = Vec::new();
        let mut observations = Vec::new();
        for (track_id, position) in landmarks {
            let Some(track) = self.tracks.iter().find(|t| t.id == track_id && t.is_live())
            else {
                continue;
            };
            let lm_id = self.next_landmark;
            self.next_landmark += 1;
            new_landmarks.push(Landmark {
                id: lm_id,
                position,
            });
            for (obs_kf, camera, px) in self.history.get(&track_id).into_iter().flatten() {
                observations.push(Observation {
                    landmark: lm_id,
                    keyframe: *obs_kf,
                    camera: *camera,
                    pixel: *px,
                });
            }
            observations.push(Observation {
                landmark: lm_id,
                keyframe: kf_id,
                camera: track.camera,
                pixel: track.position(),
            });
            self.history.entry(track_id).or_default().push((
                kf_id,
                track.camera,
                track.position(),
            ));
            self.map.link_track(track_id, lm_id);
        }
        self.map
            .insert_keyframe(
                Keyframe {
                    id: kf_id,
                    timestamp,
                    pose,
                },
                new_landmarks,
                observations,
            )
            .expect("bootstrap insertion");
        self.kf_set = self.live_set();
        self.last_kf_pose = pose;
        self.bootstrapped = true;
    }

    /// Processes one synchronized frame.
    pub fn step(&mut self, input: &FrameInput) -> Result<StepOutput, StepError> {
        self.step_with(input, None)
    }

    /// Like [`step`], with an optional external pose solver that replaces
    /// the built-in PnP (the visual-inertial mode fuses the IMU here). The
    /// solver receives the mapped observations and the motion prediction;
    /// returning None falls back to visual-only PnP for this frame.
    pub fn step_with(
        &mut self,
        input: &FrameInput,
        mut external: Option<
            &mut dyn FnMut(&[PnpObservation], &RigidTransform) -> Option<(RigidTransform, usize)>,
        >,
    ) -> Result<StepOutput, StepError> {
        assert_eq!(input.cameras.len(), self.rig.len(), "camera count mismatch");
        let frames = self.ingest(input)?;

        // First frame: unconditional keyframe at the current pose. A
        // monocular rig cannot triangulate a single view; its keyframe only
        // records features and the bootstrap is injected externally.
        if self.prev_frames.is_empty() {
            let event = self.create_keyframe(input.timestamp, &frames);
            let has_landmarks = self.map.num_landmarks() > 0;
            self.bootstrapped = has_landmarks;
            self.prev_frames = frames;
            return Ok(StepOutput {
                pose: self.pose,
                status: if has_landmarks {
                    StepStatus::Tracking { inliers: 0 }
                } else {
                    StepStatus::AwaitingInit
                },
                keyframe: Some(event),
            });
        }

        self.temporal_tracking(&frames);

        if !self.bootstrapped {
            // Monocular pre-init: hold the pose, keep tracking; the
            // pipeline decides when to bootstrap.
            self.prev_frames = frames;
            return Ok(StepOutput {
                pose: self.pose,
                status: StepStatus::AwaitingInit,
                keyframe: None,
            });
        }

        let observations = self.pnp_observations();
        let prediction = self.predicted_pose();
        let mut status = StepStatus::Lost;
        let solved = match external.as_mut() {
            Some(solver) => solver(&observations, &prediction),
            None => None,
        }
        .or_else(|| {
            solve_pnp(&observations, &self.rig, &prediction, &self.config.pnp)
                .ok()
                .map(|r| (r.pose, r.inlier_count))
        });
        match solved {
            Some((pose, inliers)) => {
                self.prev_pose = Some(self.pose);
                self.pose = pose;
                status = StepStatus::Tracking { inliers };
            }
            None => {
                // Hold the prediction, mark lost, force a keyframe attempt
                // next frame to replenish the map.
                self.prev_pose = Some(self.pose);
                self.pose = prediction;
                self.force_keyframe = true;
            }
        }

        let due = self.force_keyframe
            || keyframe_due(&self.live_set(), &self.kf_set, &self.config.keyframe)
                .unwrap_or(true);
        let keyframe = if due {
            Some(self.create_keyframe(input.timestamp, &frames))
        } else {
            None
        };

        self.prev_frames = frames;
        Ok(StepOutput {
            pose: self.pose,
            status,
            keyframe,
        })
    }
}
