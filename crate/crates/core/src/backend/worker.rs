//! The backend worker: consumes keyframe payloads from a queue, maintains
//! the global map, detects loop closures, and runs pose-graph optimization.
//!
//! In asynchronous mode a dedicated thread owns the map and the frontend
//! only touches the queue. Deterministic mode processes every payload
//! inline on the caller's thread, which makes whole-pipeline runs
//! bit-reproducible.

use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use nalgebra::Vector2;

use crate::frontend2d::ImagePyramid;
use crate::geometry::CameraRig;
use crate::localmap::KeyframeId;
use crate::solvers::LmSettings;

use super::global_map::{GlobalMap, KeyframePayload};
use super::loop_closing::{estimate_loop_delta, select_loop_landmarks, LoopConfig, LoopQueryFrame};
use super::pose_graph::{optimize_pose_graph, PoseGraphEdge};

/// Loop-verification data accompanying a keyframe payload.
#[derive(Clone, Default)]
pub enum LoopQueryData {
    /// No verification possible for this keyframe.
    #[default]
    None,
    /// Current per-camera pyramids (patch tracking).
    Images(Vec<ImagePyramid>),
    /// Source-identified observations: (external id, camera, pixel).
    Observations(Vec<(u64, usize, Vector2<f64>)>),
}

#[derive(Clone)]
pub struct BackendJob {
    pub payload: KeyframePayload,
    pub query: LoopQueryData,
}

#[derive(Debug, Clone)]
pub struct LoopEvent {
    pub from: KeyframeId,
    pub to: KeyframeId,
    pub inliers: usize,
    pub rmse_px: f64,
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub loops: LoopConfig,
    pub pgo: LmSettings,
    /// Variance scale applied to loop edges relative to odometry edges.
    /// 1.0 keeps the graph uniformly weighted.
    pub loop_edge_variance_scale: f64,
    /// Run loop detection and optimization at all.
    pub enable_loop_closing: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            loops: LoopConfig::default(),
            pgo: LmSettings::default(),
            loop_edge_variance_scale: 1.0,
            enable_loop_closing: true,
        }
    }
}

pub struct BackendOutput {
    pub map: GlobalMap,
    pub loop_events: Vec<LoopEvent>,
}

struct Core {
    map: GlobalMap,
    rig: CameraRig,
    config: BackendConfig,
    loop_events: Vec<LoopEvent>,
}

impl Core {
    fn process(&mut self, job: BackendJob) {
        let current_id = job.payload.id;
        if self.map.integrate_keyframe(job.payload).is_err() {
            return;
        }
        if !self.config.enable_loop_closing {
            return;
        }

        let current = self
            .map
            .keyframe(current_id)
            .expect("just inserted")
            .clone();
        let center = *current.world_pose.translation();
        let mut candidates = self
            .map
            .query_nearby_poses(&center, self.config.loops.search_radius);
        // Temporal neighbors are trivially nearby; drop the newest few and
        // the current keyframe itself.
        let keyframes = self.map.keyframes();
        let exclude_from = keyframes
            .len()
            .saturating_sub(self.config.loops.temporal_exclusion + 1);
        let excluded: Vec<KeyframeId> =
            keyframes[exclude_from..].iter().map(|k| k.id).collect();
        candidates.retain(|id| !excluded.contains(id));
        if candidates.is_empty() {
            return;
        }

        let query = match &job.query {
            LoopQueryData::None => return,
            LoopQueryData::Images(pyramids) => LoopQueryFrame::Images(pyramids),
            LoopQueryData::Observations(list) => LoopQueryFrame::Observations(list),
        };

        // The pose guess chains the drift-corrected node with the frontend
        // delta, matching the spatial index.
        let guess_world = current.world_pose;
        let guess_bw = guess_world.inverse();
        let Some((source_kf, matches)) =
            select_loop_landmarks(&self.map, &candidates, &query, &guess_bw, &self.rig)
        else {
            return;
        };
        if matches.len() < self.config.loops.min_landmarks {
            return;
        }
        let source = self.map.keyframe(source_kf).expect("candidate exists");
        // Landmarks into the candidate's frame using the odometry pose that
        // is consistent with their recorded positions.
        let t_mw = source.odometry_pose.inverse();
        let points: Vec<_> = matches
            .iter()
            .map(|m| {
                t_mw.transform_point(&self.map.landmark(m.landmark).expect("exists").position)
            })
            .collect();
        // Initial guess for current-from-candidate from the graph estimate.
        let init = guess_bw.compose(&source.world_pose);
        let Ok(delta) =
            estimate_loop_delta(&points, &matches, &self.rig, &init, &self.config.loops)
        else {
            return;
        };

        let edge = PoseGraphEdge::new(source_kf, current_id, delta.t_bm.inverse())
            .with_sigma(self.config.loop_edge_variance_scale.sqrt());
        self.map.add_loop_edge(edge);
        self.loop_events.push(LoopEvent {
            from: source_kf,
            to: current_id,
            inliers: delta.inlier_count,
            rmse_px: delta.inlier_rmse_px,
        });

        let nodes = self.map.pose_graph_nodes();
        if let Ok(result) = optimize_pose_graph(&nodes, self.map.edges(), &self.config.pgo) {
            self.map.apply_optimized_poses(&result.nodes);
        }
    }
}

enum Runner {
    Deterministic(Core),
    Background {
        tx: Sender<BackendJob>,
        handle: JoinHandle<()>,
        shared: Arc<Mutex<Option<(GlobalMap, Vec<LoopEvent>)>>>,
    },
}

/// Global-map maintainer. One instance per pipeline run.
pub struct Backend {
    runner: Runner,
}

impl Backend {
    pub fn new(rig: CameraRig, config: BackendConfig, deterministic: bool) -> Self {
        if deterministic {
            Self {
                runner: Runner::Deterministic(Core {
                    map: GlobalMap::new(),
                    rig,
                    config,
                    loop_events: Vec::new(),
                }),
            }
        } else {
            let (tx, rx) = channel::<BackendJob>();
            let shared = Arc::new(Mutex::new(None));
            let out = Arc::clone(&shared);
            let handle = std::thread::spawn(move || {
                let mut core = Core {
                    map: GlobalMap::new(),
                    rig,
                    config,
                    loop_events: Vec::new(),
                };
                while let Ok(job) = rx.recv() {
                    core.process(job);
                }
                *out.lock().expect("backend mutex") = Some((core.map, core.loop_events));
            });
            Self {
                runner: Runner::Background { tx, handle, shared },
            }
        }
    }

    pub fn submit(&mut self, job: BackendJob) {
        match &mut self.runner {
            Runner::Deterministic(core) => core.process(job),
            Runner::Background { tx, .. } => {
                let _ = tx.send(job);
            }
        }
    }

    /// Drains the queue and returns the final map and loop events.
    pub fn finish(self) -> BackendOutput {
        match self.runner {
            Runner::Deterministic(core) => BackendOutput {
                map: core.map,
                loop_events: core.loop_events,
            },
            Runner::Background { tx, handle, shared } => {
                drop(tx);
                let _ = handle.join();
                let (map, loop_events) = shared
                    .lock()
                    .expect("backend mutex")
                    .take()
                    .unwrap_or_else(|| (GlobalMap::new(), Vec::new()));
                BackendOutput { map, loop_events }
            }
        }
    }
}
