//! Estimated trajectories and their file format.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::geometry::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    Tracked,
    Keyframe,
    Lost,
    Relocalized,
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    /// Base-from-world transform.
    pub pose: RigidTransform,
    pub status: FrameStatus,
}

impl TrajectoryEntry {
    /// World-from-base pose (the trajectory-file convention).
    pub fn world_pose(&self) -> RigidTransform {
        self.pose.inverse()
    }
}

/// Per-frame pose estimates with strictly increasing timestamps.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryEstimate {
    entries: Vec<TrajectoryEntry>,
}

impl TrajectoryEstimate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TrajectoryEntry) {
        if let Some(last) = self.entries.last() {
            assert!(
                entry.timestamp > last.timestamp,
                "timestamps must be strictly increasing"
            );
        }
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes TUM lines: `timestamp tx ty tz qx qy qz qw` of the world
    /// pose, nine decimal places.
    pub fn write_tum<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            let wp = e.world_pose();
            let t = wp.translation();
            let q = wp.rotation();
            writeln!(
                w,
                "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            )?;
        }
        Ok(())
    }

    pub fn save_tum(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_tum(std::io::BufWriter::new(f))
    }

    /// Parses a TUM trajectory file ('#' comments allowed). Statuses come
    /// back as `Tracked`.
    pub fn load_tum(path: &Path) -> std::io::Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut out = Self::new();
        for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = trimmed
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}:{}: {e}", path.display(), lineno + 1),
                    )
                })?;
            if fields.len() != 8 {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!(
                        "{}:{}: expected 8 fields, got {}",
                        path.display(),
                        lineno + 1,
                        fields.len()
                    ),
                ));
            }
            let world = RigidTransform::from_quaternion_parts(
                fields[7],
                fields[4],
                fields[5],
                fields[6],
                nalgebra::Vector3::new(fields[1], fields[2], fields[3]),
            );
            out.push(TrajectoryEntry {
                timestamp: fields[0],
                pose: world.inverse(),
                status: FrameStatus::Tracked,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use nalgebra::Vector3;

    #[test]
    fn tum_round_trip() {
        let mut traj = TrajectoryEstimate::new();
        for i in 0..5 {
            traj.push(TrajectoryEntry {
                timestamp: i as f64 * 0.1,
                pose: se3_exp(&Twist::new(
                    Vector3::new(0.01 * i as f64, 0.0, 0.02),
                    Vector3::new(0.1 * i as f64, -0.05, 0.0),
                )),
                status: FrameStatus::Tracked,
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        traj.save_tum(&path).unwrap();
        let loaded = TrajectoryEstimate::load_tum(&path).unwrap();
        assert_eq!(loaded.len(), traj.len());
        for (a, b) in traj.entries().iter().zip(loaded.entries().iter()) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-9);
            assert!(a.pose.max_abs_diff(&b.pose) < 1e-8);
        }
    }

    #[test]
    #[should_panic(expected = "strictly increasing")]
    fn non_monotone_timestamps_panic() {
        let mut traj = TrajectoryEstimate::new();
        let entry = TrajectoryEntry {
            timestamp: 1.0,
            pose: RigidTransform::identity(),
            status: FrameStatus::Tracked,
        };
        traj.push(entry);
        traj.push(entry);
    }
}
