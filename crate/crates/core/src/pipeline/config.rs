//! Pipeline configuration and the flat key-value config/rig file formats.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::backend::BackendConfig;
use crate::geometry::{CameraModel, CameraRig, RigCamera, RigidTransform};
use crate::multicam::OdometryConfig;
use crate::rgbd::RgbdConfig;
use crate::solvers::{RansacConfig, SbaConfig};
use crate::vio::{GravityInitConfig, ImuNoise, ViFrameConfig, ViSbaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Mono,
    Stereo,
    MultiStereo,
    StereoInertial,
    MonoDepth,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mono" => Some(Mode::Mono),
            "stereo" => Some(Mode::Stereo),
            "multi-stereo" => Some(Mode::MultiStereo),
            "stereo-inertial" => Some(Mode::StereoInertial),
            "mono-depth" => Some(Mode::MonoDepth),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Mono => "mono",
            Mode::Stereo => "stereo",
            Mode::MultiStereo => "multi-stereo",
            Mode::StereoInertial => "stereo-inertial",
            Mode::MonoDepth => "mono-depth",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonoBootstrapConfig {
    pub min_matches: usize,
    pub min_median_disparity_px: f64,
    pub ransac: RansacConfig,
}

impl Default for MonoBootstrapConfig {
    fn default() -> Self {
        Self {
            min_matches: 50,
            min_median_disparity_px: 1.0,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VioPipelineConfig {
    pub gravity: GravityInitConfig,
    pub frame: ViFrameConfig,
    pub sba: ViSbaConfig,
    pub imu_noise: ImuNoise,
    /// Keyframes of visual-only history before gravity initialization.
    pub min_keyframes_for_init: usize,
}

impl Default for VioPipelineConfig {
    fn default() -> Self {
        Self {
            gravity: GravityInitConfig::default(),
            frame: ViFrameConfig::default(),
            sba: ViSbaConfig::default(),
            imu_noise: ImuNoise::default(),
            min_keyframes_for_init: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Loop closing + pose-graph optimization on the exported trajectory.
    pub slam: bool,
    /// Serialize the backend and local bundle adjustment on the caller's
    /// thread for bit-reproducible runs.
    pub deterministic: bool,
    pub seed: u64,
    /// Asynchronous local bundle adjustment after every keyframe.
    pub local_ba: bool,
    pub odometry: OdometryConfig,
    pub sba: SbaConfig,
    pub backend: BackendConfig,
    pub vio: VioPipelineConfig,
    pub rgbd: RgbdConfig,
    pub mono: MonoBootstrapConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Stereo,
            slam: false,
            deterministic: true,
            seed: 0,
            local_ba: true,
            odometry: OdometryConfig::default(),
            sba: SbaConfig::default(),
            backend: BackendConfig::default(),
            vio: VioPipelineConfig::default(),
            rgbd: RgbdConfig::default(),
            mono: MonoBootstrapConfig::default(),
        }
    }
}

/// Parses `key = value` lines; '#' starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`", lineno + 1));
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

impl PipelineConfig {
    /// Applies a flat key-value config on top of the defaults. Unknown keys
    /// are rejected.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), String> {
        let kv = parse_kv(text)?;
        for (key, value) in kv {
            let parse_f64 =
                |v: &str| v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
            let parse_usize =
                |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
            let parse_bool = |v: &str| match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(format!("{key}: expected a boolean, got `{v}`")),
            };
            match key.as_str() {
                "keyframe.threshold" => {
                    self.odometry.keyframe =
                        crate::frontend2d::KeyframePolicy::new(parse_f64(&value)?);
                }
                "window" => self.odometry.window = parse_usize(&value)?,
                "features.min_total" => {
                    self.odometry.features.min_total = parse_usize(&value)?
                }
                "features.grid_cols" => {
                    self.odometry.features.grid_cols = parse_usize(&value)?
                }
                "features.grid_rows" => {
                    self.odometry.features.grid_rows = parse_usize(&value)?
                }
                "features.min_score" => {
                    self.odometry.features.min_score = parse_f64(&value)?
                }
                "features.min_separation" => {
                    self.odometry.features.min_separation = parse_f64(&value)?
                }
                "lk.half_window" => self.odometry.lk.half_window = parse_usize(&value)?,
                "lk.ncc_min" => self.odometry.lk.ncc_min = parse_f64(&value)?,
                "lk.max_iterations" => {
                    self.odometry.lk.max_iterations = parse_usize(&value)?
                }
                "pyramid.levels" => self.odometry.pyramid_levels = parse_usize(&value)?,
                "pnp.pixel_sigma" => {
                    self.odometry.pnp.pixel_sigma = parse_f64(&value)?;
                }
                "sba.enabled" => self.local_ba = parse_bool(&value)?,
                "sba.pixel_sigma" => self.sba.pixel_sigma = parse_f64(&value)?,
                "loop.radius" => {
                    self.backend.loops.search_radius = parse_f64(&value)?
                }
                "loop.temporal_exclusion" => {
                    self.backend.loops.temporal_exclusion = parse_usize(&value)?
                }
                "loop.min_landmarks" => {
                    self.backend.loops.min_landmarks = parse_usize(&value)?
                }
                "rgbd.intensity_sigma" => self.rgbd.intensity_sigma = parse_f64(&value)?,
                "rgbd.depth_sigma_coeff" => {
                    self.rgbd.depth_sigma_coeff = parse_f64(&value)?
                }
                "rgbd.p2p_sigma" => self.rgbd.p2p_sigma = parse_f64(&value)?,
                "mono.min_matches" => self.mono.min_matches = parse_usize(&value)?,
                "mono.min_median_disparity" => {
                    self.mono.min_median_disparity_px = parse_f64(&value)?
                }
                "mono.ransac_iterations" => {
                    self.mono.ransac.iterations = parse_usize(&value)?
                }
                "vio.min_keyframes" => {
                    self.vio.min_keyframes_for_init = parse_usize(&value)?
                }
                "vio.excitation_threshold" => {
                    self.vio.gravity.excitation_threshold = parse_f64(&value)?
                }
                other => return Err(format!("unknown config key `{other}`")),
            }
        }
        Ok(())
    }
}

/// Parses a rig calibration file:
///
/// ```text
/// cameras = 2
/// cam0.intrinsics = fx fy cx cy width height
/// cam0.extrinsic  = tx ty tz qx qy qz qw   # camera-from-base
/// ```
pub fn parse_rig_text(text: &str) -> Result<CameraRig, String> {
    let kv = parse_kv(text)?;
    let count: usize = kv
        .get("cameras")
        .ok_or("missing `cameras`")?
        .parse()
        .map_err(|e| format!("cameras: {e}"))?;
    if count == 0 {
        return Err("rig needs at least one camera".into());
    }
    let mut cameras = Vec::with_capacity(count);
    for k in 0..count {
        let intr_key = format!("cam{k}.intrinsics");
        let ext_key = format!("cam{k}.extrinsic");
        let intr = kv.get(&intr_key).ok_or(format!("missing `{intr_key}`"))?;
        let fields: Vec<f64> = intr
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("{intr_key}: {e}"))?;
        if fields.len() != 6 {
            return Err(format!("{intr_key}: expected 6 fields"));
        }
        let model = CameraModel::new(
            fields[0],
            fields[1],
            fields[2],
            fields[3],
            fields[4] as u32,
            fields[5] as u32,
        );
        let extrinsic = match kv.get(&ext_key) {
            None => RigidTransform::identity(),
            Some(v) => {
                let f: Vec<f64> = v
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| format!("{ext_key}: {e}"))?;
                if f.len() != 7 {
                    return Err(format!("{ext_key}: expected 7 fields"));
                }
                RigidTransform::from_quaternion_parts(
                    f[6],
                    f[3],
                    f[4],
                    f[5],
                    Vector3::new(f[0], f[1], f[2]),
                )
            }
        };
        cameras.push(RigCamera { model, extrinsic });
    }
    // Reject unknown keys.
    for key in kv.keys() {
        let ok = key == "cameras"
            || (0..count).any(|k| {
                key == &format!("cam{k}.intrinsics") || key == &format!("cam{k}.extrinsic")
            });
        if !ok {
            return Err(format!("unknown rig key `{key}`"));
        }
    }
    Ok(CameraRig::new(cameras))
}

/// Serializes a rig into the calibration text format.
pub fn rig_to_text(rig: &CameraRig) -> String {
    let mut out = format!("cameras = {}\n", rig.len());
    for (k, cam) in rig.cameras().iter().enumerate() {
        out.push_str(&format!(
            "cam{k}.intrinsics = {} {} {} {} {} {}\n",
            cam.model.fx, cam.model.fy, cam.model.cx, cam.model.cy, cam.model.width,
            cam.model.height
        ));
        let t = cam.extrinsic.translation();
        let q = cam.extrinsic.rotation();
        out.push_str(&format!(
            "cam{k}.extrinsic = {} {} {} {} {} {} {}\n",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    out
}
