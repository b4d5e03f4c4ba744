//! Feature tracks and the keyframe trigger.

use std::collections::BTreeSet;

use nalgebra::Vector2;
use thiserror::Error;

use crate::localmap::{LandmarkId, TrackId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Live,
    Lost,
}

/// A feature's 2D history in one camera. A lost track never comes back.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: TrackId,
    pub camera: usize,
    positions: Vec<Vector2<f64>>,
    status: TrackStatus,
    pub landmark: Option<LandmarkId>,
}

impl Track {
    pub fn new(id: TrackId, camera: usize, position: Vector2<f64>) -> Self {
        Self {
            id,
            camera,
            positions: vec![position],
            status: TrackStatus::Live,
            landmark: None,
        }
    }

    pub fn status(&self) -> TrackStatus {
        self.status
    }

    pub fn is_live(&self) -> bool {
        self.status == TrackStatus::Live
    }

    pub fn mark_lost(&mut self) {
        self.status = TrackStatus::Lost;
    }

    pub fn position(&self) -> Vector2<f64> {
        *self.positions.last().expect("track always has a position")
    }

    pub fn positions(&self) -> &[Vector2<f64>] {
        &self.positions
    }

    /// Appends the position for the next frame; only valid while live.
    pub fn advance(&mut self, position: Vector2<f64>) {
        debug_assert!(self.is_live(), "cannot advance a lost track");
        self.positions.push(position);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KeyframePolicy {
    /// Survival-ratio threshold in (0, 1): a keyframe fires when the
    /// fraction of still-tracked keyframe features drops strictly below it.
    pub survival_threshold: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            survival_threshold: 0.7,
        }
    }
}

impl KeyframePolicy {
    pub fn new(survival_threshold: f64) -> Self {
        assert!(
            survival_threshold > 0.0 && survival_threshold < 1.0,
            "survival threshold must be in (0, 1)"
        );
        Self { survival_threshold }
    }
}

#[derive(Debug, Error)]
pub enum KeyframeError {
    #[error("keyframe feature set is empty; bootstrap the first keyframe explicitly")]
    EmptyReferenceSet,
}

/// Survival-ratio keyframe trigger over track-id sets: true iff
/// `|curr ∩ kf| / |kf|` is strictly below the policy threshold.
pub fn keyframe_due(
    s_curr: &BTreeSet<TrackId>,
    s_kf: &BTreeSet<TrackId>,
    policy: &KeyframePolicy,
) -> Result<bool, KeyframeError> {
    if s_kf.is_empty() {
        return Err(KeyframeError::EmptyReferenceSet);
    }
    let overlap = s_curr.intersection(s_kf).count();
    let ratio = overlap as f64 / s_kf.len() as f64;
    Ok(ratio < policy.survival_threshold)
}
