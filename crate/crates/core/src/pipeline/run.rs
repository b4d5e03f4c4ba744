//! Mode orchestration: frontend tracking, local bundle adjustment, the
//! asynchronous backend, and the final trajectory export.
//!
//! The first frame always bootstraps a keyframe. The live trajectory is the
//! frontend's: backend corrections are applied once at the end of the run,
//! per keyframe segment, so online poses stay smooth and odometry output
//! never depends on whether the backend ran.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::backend::{
    Backend, BackendJob, BackendOutput, GlobalLandmark, GlobalMap, GlobalObservation,
    KeyframePayload, LoopEvent, LoopQueryData,
};
use crate::frontend2d::{
    build_pyramid, keyframe_due, select_features, track_lk, GrayImage, ImagePyramid, Track,
};
use crate::geometry::{CameraRig, RigidTransform};
use crate::localmap::{KeyframeId, LandmarkId, TriangulationRay};
use crate::multicam::{KeyframeEvent, SparseOdometry, StepError, StepStatus};
use crate::rgbd::{solve_rgbd, MapFactor, RgbdError, RgbdFrame};
use crate::solvers::{
    estimate_fundamental_ransac, pose_from_fundamental, sparse_bundle_adjustment, PnpObservation,
    SolverError,
};
use crate::vio::{
    estimate_gravity, preintegrate, vi_pose_estimate, vi_sba, GravityEstimate, ImuSample,
    PreintegratedImu, VioState, VisualObservation,
};

use super::config::{Mode, PipelineConfig};
use super::source::{FrameSource, PipelineFrame};
use super::trajectory::{FrameStatus, TrajectoryEntry, TrajectoryEstimate};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame source yielded no frames")]
    NoFrames,
    #[error("mode {0} requires data the source does not provide")]
    MissingData(&'static str),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("dense alignment failed: {0}")]
    Rgbd(#[from] RgbdError),
    #[error("monocular bootstrap failed: {0}")]
    Bootstrap(#[from] SolverError),
}

pub struct RunOutput {
    /// Final trajectory; loop-corrected when SLAM is enabled.
    pub trajectory: TrajectoryEstimate,
    /// Raw frontend trajectory, independent of the backend.
    pub odometry: TrajectoryEstimate,
    pub map: GlobalMap,
    pub loop_events: Vec<LoopEvent>,
}

/// Runs the configured pipeline over a frame source.
pub fn run(
    config: &PipelineConfig,
    source: &mut dyn FrameSource,
) -> Result<RunOutput, PipelineError> {
    match config.mode {
        Mode::MonoDepth => run_mono_depth(config, source),
        _ => run_sparse(config, source),
    }
}

/// Records which keyframe each trajectory entry follows, for the final
/// per-segment loop correction.
struct KeyframeLog {
    /// (keyframe id, timestamp, odometry world pose).
    entries: Vec<(KeyframeId, f64, RigidTransform)>,
}

impl KeyframeLog {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, id: KeyframeId, timestamp: f64, pose_bw: &RigidTransform) {
        self.entries.push((id, timestamp, pose_bw.inverse()));
    }

    /// Applies per-segment corrections from the optimized global map.
    fn correct(&self, odometry: &TrajectoryEstimate, map: &GlobalMap) -> TrajectoryEstimate {
        let mut corrected = TrajectoryEstimate::new();
        for entry in odometry.entries() {
            let seg = self
                .entries
                .iter()
                .rev()
                .find(|(_, t, _)| *t <= entry.timestamp + 1e-9);
            let world = entry.world_pose();
            let fixed = match seg {
                Some((kf_id, _, odom_pose)) => match map.keyframe(*kf_id) {
                    Some(kf) => kf.world_pose.compose(&odom_pose.inverse()).compose(&world),
                    None => world,
                },
                None => world,
            };
            corrected.push(TrajectoryEntry {
                timestamp: entry.timestamp,
                pose: fixed.inverse(),
                status: entry.status,
            });
        }
        corrected
    }
}

/// Local bundle adjustment runner: inline in deterministic mode, a worker
/// thread otherwise.
enum BaRunner {
    Inline,
    Background {
        tx: std::sync::mpsc::Sender<crate::localmap::MapSnapshot>,
        rx: std::sync::mpsc::Receiver<crate::solvers::SbaResult>,
        _handle: std::thread::JoinHandle<()>,
    },
    Disabled,
}

impl BaRunner {
    fn new(config: &PipelineConfig, rig: &CameraRig) -> Self {
        if !config.local_ba {
            return BaRunner::Disabled;
        }
        if config.deterministic {
            return BaRunner::Inline;
        }
        let (tx, job_rx) = std::sync::mpsc::channel::<crate::localmap::MapSnapshot>();
        let (result_tx, rx) = std::sync::mpsc::channel();
        let rig = rig.clone();
        let sba_config = config.sba.clone();
        let handle = std::thread::spawn(move || {
            while let Ok(snapshot) = job_rx.recv() {
                if let Ok(result) = sparse_bundle_adjustment(&snapshot, &rig, &sba_config) {
                    if result_tx.send(result).is_err() {
                        break;
                    }
                }
            }
        });
        BaRunner::Background {
            tx,
            rx,
            _handle: handle,
        }
    }

    /// Submits a snapshot; in inline mode the refinement happens now and is
    /// merged immediately.
    fn submit(
        &self,
        engine: &mut SparseOdometry,
        snapshot: crate::localmap::MapSnapshot,
        rig: &CameraRig,
        config: &PipelineConfig,
    ) {
        match self {
            BaRunner::Disabled => {}
            BaRunner::Inline => {
                if let Ok(result) = sparse_bundle_adjustment(&snapshot, rig, &config.sba) {
                    engine.merge_refined(&result.poses, &result.landmarks);
                }
            }
            BaRunner::Background { tx, .. } => {
                let _ = tx.send(snapshot);
            }
        }
    }

    /// Merges any completed background refinements.
    fn drain(&self, engine: &mut SparseOdometry) {
        if let BaRunner::Background { rx, .. } = self {
            while let Ok(result) = rx.try_recv() {
                engine.merge_refined(&result.poses, &result.landmarks);
            }
        }
    }
}

/// State machine for the inertial stage of stereo-inertial mode.
struct VioStage {
    imu_log: Vec<ImuSample>,
    /// (keyframe id, timestamp) of accepted keyframes.
    keyframes: Vec<(KeyframeId, f64)>,
    gravity: Option<GravityEstimate>,
    state: Option<VioState>,
    prev_visual: Vec<VisualObservation>,
    prev_frame_time: Option<f64>,
    /// Per-keyframe states for the windowed refinement.
    kf_states: Vec<(KeyframeId, VioState)>,
}

impl VioStage {
    fn new() -> Self {
        Self {
            imu_log: Vec::new(),
            keyframes: Vec::new(),
            gravity: None,
            state: None,
            prev_visual: Vec::new(),
            prev_frame_time: None,
            kf_states: Vec::new(),
        }
    }

    fn record_imu(&mut self, samples: &[ImuSample]) {
        for s in samples {
            if self
                .imu_log
                .last()
                .is_none_or(|last| s.timestamp > last.timestamp)
            {
                self.imu_log.push(*s);
            }
        }
    }

    fn slice(&self, t0: f64, t1: f64) -> Vec<ImuSample> {
        self.imu_log
            .iter()
            .filter(|s| s.timestamp >= t0 - 1e-9 && s.timestamp <= t1 + 1e-9)
            .copied()
            .collect()
    }

    fn preintegrate_between(
        &self,
        t0: f64,
        t1: f64,
        bias_a: Vector3<f64>,
        bias_g: Vector3<f64>,
        config: &PipelineConfig,
    ) -> Option<PreintegratedImu> {
        let samples = self.slice(t0, t1);
        preintegrate(&samples, bias_a, bias_g, config.vio.imu_noise).ok()
    }

    /// Attempts gravity initialization from the visual keyframe history.
    fn try_initialize(&mut self, engine: &SparseOdometry, config: &PipelineConfig) {
        if self.gravity.is_some() || self.keyframes.len() < config.vio.min_keyframes_for_init {
            return;
        }
        let mut poses = Vec::new();
        let mut pres = Vec::new();
        let mut ok = true;
        for windows in self.keyframes.windows(2) {
            let (id0, t0) = windows[0];
            let (_, t1) = windows[1];
            let Some(kf) = engine.map().keyframe(id0) else {
                ok = false;
                break;
            };
            poses.push(kf.pose);
            match self.preintegrate_between(t0, t1, Vector3::zeros(), Vector3::zeros(), config) {
                Some(pre) => pres.push(pre),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            return;
        }
        if let Some((last_id, _)) = self.keyframes.last() {
            if let Some(kf) = engine.map().keyframe(*last_id) {
                poses.push(kf.pose);
            } else {
                return;
            }
        }
        let Ok(init) = estimate_gravity(&poses, &pres, &config.vio.gravity) else {
            return;
        };
        let velocity = *init.velocities.last().expect("one per pose");
        self.gravity = Some(init.gravity);
        self.state = Some(VioState {
            pose: *poses.last().expect("non-empty"),
            velocity,
            accel_bias: init.accel_bias,
            gyro_bias: init.gyro_bias,
        });
        // Seed per-keyframe states for the windowed refinement.
        self.kf_states = self
            .keyframes
            .iter()
            .zip(init.velocities.iter())
            .map(|((id, _), v)| {
                (
                    *id,
                    VioState {
                        pose: engine.map().keyframe(*id).expect("in window").pose,
                        velocity: *v,
                        accel_bias: init.accel_bias,
                        gyro_bias: init.gyro_bias,
                    },
                )
            })
            .collect();
    }
}

fn payload_world_delta(payload: &KeyframePayload) -> Option<RigidTransform> {
    payload.delta_from_prev
}

fn run_sparse(
    config: &PipelineConfig,
    source: &mut dyn FrameSource,
) -> Result<RunOutput, PipelineError> {
    let rig = source.rig();
    let mut engine = SparseOdometry::new(rig.clone(), config.odometry.clone());
    let mut backend_config = config.backend.clone();
    backend_config.enable_loop_closing = config.slam;
    let mut backend = Backend::new(rig.clone(), backend_config, config.deterministic);
    let ba = BaRunner::new(config, &rig);

    let mut odometry = TrajectoryEstimate::new();
    let mut kf_log = KeyframeLog::new();
    let mut vio = VioStage::new();
    let use_imu = config.mode == Mode::StereoInertial;
    let mut mono_pending = config.mode == Mode::Mono;
    let mut frames_seen = 0usize;

    while let Some(frame) = source.next_bundle() {
        frames_seen += 1;
        ba.drain(&mut engine);
        if use_imu {
            vio.record_imu(&frame.imu);
        }

        let timestamp = frame.input.timestamp;
        let mut vi_failed_this_frame = false;

        // External pose solver for the inertial mode.
        let output = if use_imu && vio.gravity.is_some() {
            let gravity = vio.gravity.expect("checked");
            let state = vio.state.expect("set with gravity");
            let prev_time = vio.prev_frame_time.expect("set after first frame");
            let pre =
                vio.preintegrate_between(prev_time, timestamp, state.accel_bias, state.gyro_bias, config);
            let prev_visual = vio.prev_visual.clone();
            let mut next_state = None;
            let mut visual_now: Vec<VisualObservation> = Vec::new();
            let frame_cfg = config.vio.frame.clone();
            let mut solver = |obs: &[PnpObservation],
                              _pred: &RigidTransform|
             -> Option<(RigidTransform, usize)> {
                let pre = pre.as_ref()?;
                visual_now = obs
                    .iter()
                    .map(|o| VisualObservation {
                        point: o.point,
                        camera: o.camera,
                        pixel: o.pixel,
                    })
                    .collect();
                match vi_pose_estimate(
                    &state,
                    None,
                    pre,
                    &prev_visual,
                    &visual_now,
                    &rig,
                    &gravity,
                    &frame_cfg,
                ) {
                    Ok((_, curr, _)) => {
                        let inliers = visual_now.len();
                        next_state = Some(curr);
                        Some((curr.pose, inliers))
                    }
                    Err(_) => None,
                }
            };
            let out = engine.step_with(&frame.input, Some(&mut solver))?;
            match next_state {
                Some(s) => {
                    vio.state = Some(s);
                    vio.prev_visual = visual_now;
                }
                None => {
                    vi_failed_this_frame = true;
                }
            }
            out
        } else {
            engine.step(&frame.input)?
        };

        // Visual-only fallback keeps the inertial state consistent with the
        // engine pose.
        if vi_failed_this_frame {
            if let Some(state) = vio.state.as_mut() {
                state.pose = output.pose;
            }
            vio.prev_visual.clear();
        }

        let status = match (&output.status, output.keyframe.is_some()) {
            (StepStatus::Lost, _) => FrameStatus::Lost,
            (_, true) => FrameStatus::Keyframe,
            _ => FrameStatus::Tracked,
        };
        odometry.push(TrajectoryEntry {
            timestamp,
            pose: output.pose,
            status,
        });

        // Monocular bootstrap attempts, retried until they succeed.
        if mono_pending {
            if let StepStatus::AwaitingInit = output.status {
                if frames_seen > 1 {
                    match try_mono_bootstrap(&mut engine, &rig, config, timestamp) {
                        Ok(true) => {
                            mono_pending = false;
                            ba.submit(&mut engine, engine.map().snapshot(), &rig, config);
                        }
                        Ok(false) => {}
                        Err(_) => {}
                    }
                }
            } else {
                mono_pending = false;
            }
        }

        if let Some(event) = output.keyframe {
            let KeyframeEvent {
                payload,
                query,
                snapshot,
            } = event;
            if use_imu {
                vio.keyframes.push((payload.id, timestamp));
                if vio.gravity.is_none() {
                    vio.try_initialize(&engine, config);
                } else if let (Some(gravity), Some(state)) = (vio.gravity, vio.state) {
                    // Windowed visual-inertial refinement over the keyframe
                    // states currently in the map window.
                    vio.kf_states.push((payload.id, state));
                    let snapshot_ids: Vec<KeyframeId> =
                        snapshot.keyframes.iter().map(|k| k.id).collect();
                    vio.kf_states.retain(|(id, _)| snapshot_ids.contains(id));
                    let aligned = vio.kf_states.len() == snapshot.keyframes.len();
                    if aligned && vio.kf_states.len() >= 2 && config.local_ba {
                        let states: Vec<VioState> =
                            vio.kf_states.iter().map(|(_, s)| *s).collect();
                        let mut pres = Vec::new();
                        let mut ok = true;
                        for pair in vio.keyframes.windows(2) {
                            if !snapshot_ids.contains(&pair[0].0) {
                                continue;
                            }
                            match vio.preintegrate_between(
                                pair[0].1,
                                pair[1].1,
                                states[0].accel_bias,
                                states[0].gyro_bias,
                                config,
                            ) {
                                Some(p) => pres.push(p),
                                None => {
                                    ok = false;
                                    break;
                                }
                            }
                        }
                        if ok && pres.len() + 1 == states.len() {
                            if let Ok(result) =
                                vi_sba(&states, &snapshot, &pres, &rig, &gravity, &config.vio.sba)
                            {
                                let poses: Vec<(KeyframeId, RigidTransform)> = result
                                    .states
                                    .iter()
                                    .map(|(id, s)| (*id, s.pose))
                                    .collect();
                                engine.merge_refined(&poses, &result.landmarks);
                                vio.kf_states = result.states.clone();
                                if let (Some((_, newest)), Some(st)) =
                                    (result.states.last(), vio.state.as_mut())
                                {
                                    st.velocity = newest.velocity;
                                    st.accel_bias = newest.accel_bias;
                                    st.gyro_bias = newest.gyro_bias;
                                }
                            }
                        }
                    }
                }
            } else {
                ba.submit(&mut engine, snapshot, &rig, config);
            }
            kf_log.push(payload.id, timestamp, &payload.pose);
            let _ = payload_world_delta(&payload);
            backend.submit(BackendJob { payload, query });
        }

        vio.prev_frame_time = Some(timestamp);
    }

    if frames_seen == 0 {
        return Err(PipelineError::NoFrames);
    }

    let BackendOutput { map, loop_events } = backend.finish();
    let trajectory = if config.slam {
        kf_log.correct(&odometry, &map)
    } else {
        odometry.clone()
    };
    Ok(RunOutput {
        trajectory,
        odometry,
        map,
        loop_events,
    })
}

/// Two-view monocular bootstrap: fundamental matrix over the tracks seen
/// since the first keyframe, pose recovery, triangulation, and scale
/// normalization to a unit median depth.
fn try_mono_bootstrap(
    engine: &mut SparseOdometry,
    rig: &CameraRig,
    config: &PipelineConfig,
    timestamp: f64,
) -> Result<bool, PipelineError> {
    let model = rig.camera(0).model;
    // Matches: keyframe-0 observation -> current position, per live track.
    let mut matches: Vec<(Vector2<f64>, Vector2<f64>)> = Vec::new();
    let mut track_ids = Vec::new();
    for track in engine.tracks().iter().filter(|t| t.is_live()) {
        let history = engine.track_history(track.id);
        let Some((_, _, first_px)) = history.iter().find(|(kf, _, _)| *kf == 0) else {
            continue;
        };
        matches.push((*first_px, track.position()));
        track_ids.push(track.id);
    }
    if matches.len() < config.mono.min_matches {
        return Ok(false);
    }
    let mut disparities: Vec<f64> = matches.iter().map(|(a, b)| (a - b).norm()).collect();
    disparities.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if disparities[disparities.len() / 2] < config.mono.min_median_disparity_px {
        return Ok(false);
    }

    let mut ransac = config.mono.ransac.clone();
    ransac.seed = config.seed;
    let Ok(fundamental) = estimate_fundamental_ransac(&matches, &ransac) else {
        return Ok(false);
    };
    let Ok(relative) =
        pose_from_fundamental(&fundamental.f, &model, &matches, Some(&fundamental.inliers))
    else {
        return Ok(false);
    };

    // Triangulate inliers in the keyframe-0 frame (= world).
    let mut landmarks = Vec::new();
    let mut depths = Vec::new();
    for ((m, inlier), track_id) in matches
        .iter()
        .zip(fundamental.inliers.iter())
        .zip(track_ids.iter())
    {
        if !inlier {
            continue;
        }
        let rays = [
            TriangulationRay {
                camera_from_world: RigidTransform::identity(),
                model,
                pixel: m.0,
            },
            TriangulationRay {
                camera_from_world: relative,
                model,
                pixel: m.1,
            },
        ];
        if let Ok(p) = crate::localmap::triangulate(&rays) {
            depths.push(p.z);
            landmarks.push((*track_id, p));
        }
    }
    if landmarks.len() < config.mono.min_matches / 2 {
        return Ok(false);
    }
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = depths[depths.len() / 2];
    if median <= 1e-6 {
        return Ok(false);
    }
    let scale = 1.0 / median;
    let scaled: Vec<(crate::localmap::TrackId, Vector3<f64>)> = landmarks
        .into_iter()
        .map(|(id, p)| (id, p * scale))
        .collect();
    let pose = RigidTransform::from_parts(*relative.rotation(), relative.translation() * scale);
    engine.inject_bootstrap(timestamp, pose, scaled);
    Ok(true)
}

/// Landmark store for the dense mono-depth mode.
struct DepthLandmarks {
    next_id: LandmarkId,
    /// Landmark world positions keyed by the live track.
    by_track: std::collections::BTreeMap<u64, (LandmarkId, Vector3<f64>)>,
}

fn run_mono_depth(
    config: &PipelineConfig,
    source: &mut dyn FrameSource,
) -> Result<RunOutput, PipelineError> {
    let rig = source.rig();
    let model = rig.camera(0).model;
    let mut backend_config = config.backend.clone();
    backend_config.enable_loop_closing = config.slam;
    let mut backend = Backend::new(rig.clone(), backend_config, config.deterministic);

    let mut odometry = TrajectoryEstimate::new();
    let mut kf_log = KeyframeLog::new();
    let levels = config.odometry.pyramid_levels.min(4);

    let mut prev: Option<(RgbdFrame, ImagePyramid)> = None;
    let mut pose = RigidTransform::identity();
    let mut prev_pose: Option<RigidTransform> = None;
    let mut tracks: Vec<Track> = Vec::new();
    let mut next_track: u64 = 0;
    let mut store = DepthLandmarks {
        next_id: 0,
        by_track: std::collections::BTreeMap::new(),
    };
    let mut kf_set: std::collections::BTreeSet<u64> = std::collections::BTreeSet::new();
    let mut next_kf: KeyframeId = 0;
    let mut last_kf_pose = RigidTransform::identity();
    let mut frames_seen = 0usize;

    while let Some(frame) = source.next_bundle() {
        let Some((gray, depth)) = frame.rgbd else {
            return Err(PipelineError::MissingData("mono-depth needs RGB-D frames"));
        };
        let timestamp = frame.input.timestamp;
        frames_seen += 1;
        let rgbd_frame = RgbdFrame::build(gray.clone(), depth, levels)
            .map_err(|_| PipelineError::MissingData("frame too small for the pyramid"))?;
        let pyramid = build_pyramid(gray, levels)
            .map_err(|_| PipelineError::MissingData("frame too small for the pyramid"))?;

        let mut status = FrameStatus::Tracked;
        let mut keyframe_due_now = false;

        match prev.take() {
            None => {
                // Bootstrap keyframe.
                keyframe_due_now = true;
                status = FrameStatus::Keyframe;
            }
            Some((prev_frame, prev_pyr)) => {
                track_lk(&prev_pyr, &pyramid, &mut tracks, &config.odometry.lk);
                store
                    .by_track
                    .retain(|id, _| tracks.iter().any(|t| t.id == *id && t.is_live()));

                // Point-to-point matches from surviving tracks.
                let matches: Vec<(Vector2<f64>, Vector2<f64>)> = tracks
                    .iter()
                    .filter(|t| t.is_live() && t.positions().len() >= 2)
                    .map(|t| {
                        let n = t.positions().len();
                        (t.positions()[n - 2], t.positions()[n - 1])
                    })
                    .collect();
                // Reprojection factors against stored landmarks.
                let map_factors: Vec<MapFactor> = tracks
                    .iter()
                    .filter(|t| t.is_live())
                    .filter_map(|t| {
                        let (_, world) = store.by_track.get(&t.id)?;
                        // `pose` is still the previous frame's transform.
                        Some(MapFactor {
                            point_frame1: pose.transform_point(world),
                            pixel: t.position(),
                        })
                    })
                    .collect();

                // Constant-velocity init for the relative transform.
                let init = match prev_pose {
                    Some(pp) => pose.compose(&pp.inverse()),
                    None => RigidTransform::identity(),
                };
                let result = solve_rgbd(
                    &prev_frame,
                    &rgbd_frame,
                    &model,
                    &matches,
                    &map_factors,
                    &init,
                    &config.rgbd,
                )?;
                prev_pose = Some(pose);
                pose = result.transform.compose(&pose);

                let live: std::collections::BTreeSet<u64> = tracks
                    .iter()
                    .filter(|t| t.is_live())
                    .map(|t| t.id)
                    .collect();
                keyframe_due_now = kf_set.is_empty()
                    || keyframe_due(&live, &kf_set, &config.odometry.keyframe).unwrap_or(true);
                if keyframe_due_now {
                    status = FrameStatus::Keyframe;
                }
            }
        }

        odometry.push(TrajectoryEntry {
            timestamp,
            pose,
            status,
        });

        if keyframe_due_now {
            // Select fresh features and unproject landmarks with depth.
            let fresh = select_features(&pyramid, &config.odometry.features, &tracks);
            for px in fresh {
                tracks.push(Track::new(next_track, 0, px));
                next_track += 1;
            }
            let depth0 = &rgbd_frame.depth[0];
            let world_from_base = pose.inverse();
            let mut payload_landmarks = Vec::new();
            let mut payload_obs = Vec::new();
            let mut features = Vec::new();
            for t in tracks.iter().filter(|t| t.is_live()) {
                let entry = store.by_track.get(&t.id).copied();
                let (lm_id, world) = match entry {
                    Some(v) => v,
                    None => {
                        let Some(z) = depth0.depth_at(&t.position()) else {
                            continue;
                        };
                        let Ok(p_cam) = model.unproject(&t.position(), z) else {
                            continue;
                        };
                        let world = world_from_base.transform_point(&p_cam);
                        let id = store.next_id;
                        store.next_id += 1;
                        store.by_track.insert(t.id, (id, world));
                        (id, world)
                    }
                };
                payload_landmarks.push(GlobalLandmark {
                    id: lm_id,
                    position: world,
                    external_id: None,
                });
                payload_obs.push(GlobalObservation {
                    landmark: lm_id,
                    camera: 0,
                    pixel: t.position(),
                    external_id: None,
                });
                if let Some(f) = crate::backend::extract_patch_feature(&pyramid, t.position(), 0)
                {
                    features.push((lm_id, f));
                }
            }
            let delta = if next_kf == 0 {
                None
            } else {
                Some(last_kf_pose.compose(&pose.inverse()))
            };
            let payload = KeyframePayload {
                id: next_kf,
                timestamp,
                pose,
                delta_from_prev: delta,
                landmarks: payload_landmarks,
                observations: payload_obs,
                features,
            };
            kf_log.push(next_kf, timestamp, &pose);
            backend.submit(BackendJob {
                payload,
                query: LoopQueryData::Images(vec![pyramid.clone()]),
            });
            next_kf += 1;
            last_kf_pose = pose;
            kf_set = tracks
                .iter()
                .filter(|t| t.is_live())
                .map(|t| t.id)
                .collect();
            tracks.retain(|t| t.is_live());
        }

        prev = Some((rgbd_frame, pyramid));
    }

    if frames_seen == 0 {
        return Err(PipelineError::NoFrames);
    }
    let BackendOutput { map, loop_events } = backend.finish();
    let trajectory = if config.slam {
        kf_log.correct(&odometry, &map)
    } else {
        odometry.clone()
    };
    Ok(RunOutput {
        trajectory,
        odometry,
        map,
        loop_events,
    })
}
