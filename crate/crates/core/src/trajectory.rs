//! Stage C camera planning: orbital trajectories about the scene centroid and
//! the alternating-azimuth self-evolution schedule.

use crate::error::EvoError;
use crate::geometry::CameraPose;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Orbit around `center` at the seed view's radius and elevation.
#[derive(Debug, Clone)]
pub struct OrbitSpec {
    pub center: Vector3<f64>,
    /// Seed camera position; fixes radius, elevation and the zero azimuth.
    pub seed_position: Vector3<f64>,
    /// Degrees, inclusive range swept by the trajectory.
    pub azimuth_range_deg: (f64, f64),
    pub frame_count: usize,
}

impl OrbitSpec {
    pub fn validate(&self) -> Result<(), EvoError> {
        if self.frame_count < 2 {
            return Err(EvoError::Invalid("orbit needs at least 2 frames".into()));
        }
        if (self.seed_position - self.center).norm() < 1e-9 {
            return Err(EvoError::Invalid("orbit radius is zero".into()));
        }
        Ok(())
    }
}

/// One pose of an exported trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPose {
    pub azimuth_deg: f64,
    pub position: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

/// Poses with azimuths linearly spaced over the inclusive range, positions on
/// the circle through the seed position about the center, each looking at the
/// center with world +Y up. Azimuth 0 reproduces the seed position, so frame
/// 0 coincides with the seed pose whenever the range starts at 0 and the seed
/// itself is a +Y-up look-at toward the center.
pub fn orbital_trajectory(spec: &OrbitSpec) -> Result<Vec<CameraPose>, EvoError> {
    spec.validate()?;
    let offset = spec.seed_position - spec.center;
    let radius = offset.norm();
    // Elevation relative to the world XZ plane (up = +Y).
    let elevation = (offset.y / radius).asin();
    let planar = (offset.x * offset.x + offset.z * offset.z).sqrt();
    // Azimuth 0 at the seed's heading; degenerate top-down orbits keep a
    // fixed heading.
    let base_azimuth = if planar > 1e-12 { offset.x.atan2(offset.z) } else { 0.0 };
    let (a0, a1) = spec.azimuth_range_deg;
    let n = spec.frame_count;
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let az_deg = a0 + (a1 - a0) * i as f64 / (n - 1) as f64;
        let az = base_azimuth + az_deg.to_radians();
        let eye = spec.center
            + Vector3::new(
                radius * elevation.cos() * az.sin(),
                radius * elevation.sin(),
                radius * elevation.cos() * az.cos(),
            );
        poses.push(CameraPose::look_at(eye, spec.center, Vector3::y())?);
    }
    Ok(poses)
}

pub fn export_trajectory(spec: &OrbitSpec, poses: &[CameraPose]) -> Vec<TrajectoryPose> {
    let (a0, a1) = spec.azimuth_range_deg;
    let n = poses.len();
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let az = if n > 1 { a0 + (a1 - a0) * i as f64 / (n - 1) as f64 } else { a0 };
            let c = pose.camera_center();
            let r = &pose.rotation;
            TrajectoryPose {
                azimuth_deg: az,
                position: [c.x, c.y, c.z],
                rotation: [
                    [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                    [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                    [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                ],
            }
        })
        .collect()
}

/// Alternating azimuth schedule: odd iterations sweep [0, +amplitude], even
/// iterations [0, -amplitude]. Iterations beyond the optional explicit table
/// reuse the alternation with a logged notice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Degrees; the appendix default.
    pub amplitude_deg: f64,
    /// Optional explicit ranges for iterations 1..=len.
    #[serde(default)]
    pub table: Vec<(f64, f64)>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { amplitude_deg: 45.0, table: Vec::new() }
    }
}

pub fn iteration_schedule(t: usize, cfg: &ScheduleConfig) -> (f64, f64) {
    assert!(t >= 1, "iterations are 1-based");
    if let Some(range) = cfg.table.get(t - 1) {
        return *range;
    }
    if !cfg.table.is_empty() || t > 2 {
        log::info!("schedule table exhausted at iteration {t}; reusing the alternating default");
    }
    if t % 2 == 1 {
        (0.0, cfg.amplitude_deg)
    } else {
        (0.0, -cfg.amplitude_deg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraIntrinsics};

    fn spec(n: usize, range: (f64, f64)) -> OrbitSpec {
        OrbitSpec {
            center: Vector3::new(0.0, 0.0, 3.0),
            seed_position: Vector3::new(0.0, 1.0, 0.0),
            azimuth_range_deg: range,
            frame_count: n,
        }
    }

    #[test]
    fn azimuths_are_linearly_spaced() {
        let poses = orbital_trajectory(&spec(3, (0.0, 45.0))).unwrap();
        assert_eq!(poses.len(), 3);
        let exported = export_trajectory(&spec(3, (0.0, 45.0)), &poses);
        assert_eq!(exported[0].azimuth_deg, 0.0);
        assert!((exported[1].azimuth_deg - 22.5).abs() < 1e-12);
        assert!((exported[2].azimuth_deg - 45.0).abs() < 1e-12);
    }

    #[test]
    fn radius_fixed_over_the_orbit() {
        let s = spec(121, (0.0, 45.0));
        let radius = (s.seed_position - s.center).norm();
        let poses = orbital_trajectory(&s).unwrap();
        for p in &poses {
            let d = (p.camera_center() - s.center).norm();
            assert!((d - radius).abs() < 1e-9, "radius drift {d} vs {radius}");
        }
    }

    #[test]
    fn poses_are_orthonormal() {
        let poses = orbital_trajectory(&spec(11, (0.0, -45.0))).unwrap();
        for p in &poses {
            let dev = (p.rotation.transpose() * p.rotation - nalgebra::Matrix3::identity()).norm();
            assert!(dev < 1e-9);
        }
    }

    #[test]
    fn frame_zero_anchors_to_seed_pose() {
        let s = spec(5, (0.0, 45.0));
        let poses = orbital_trajectory(&s).unwrap();
        assert!((poses[0].camera_center() - s.seed_position).norm() < 1e-9);
        // A +Y-up look-at seed camera re-projects the center to the same
        // pixel as frame 0, within 0.5 px.
        let seed = CameraPose::look_at(s.seed_position, s.center, Vector3::y()).unwrap();
        let k = CameraIntrinsics::from_hfov_deg(60.0, 128, 128).unwrap();
        let a = project(&s.center, &k, &seed).unwrap();
        let b = project(&s.center, &k, &poses[0]).unwrap();
        assert!((a.pixel - b.pixel).norm() < 0.5);
    }

    #[test]
    fn schedule_alternates_sign() {
        let cfg = ScheduleConfig::default();
        assert_eq!(iteration_schedule(1, &cfg), (0.0, 45.0));
        assert_eq!(iteration_schedule(2, &cfg), (0.0, -45.0));
        assert_eq!(iteration_schedule(3, &cfg), (0.0, 45.0), "table exhausted → reuse");
        let custom = ScheduleConfig { amplitude_deg: 45.0, table: vec![(0.0, 30.0), (0.0, -30.0)] };
        assert_eq!(iteration_schedule(1, &custom), (0.0, 30.0));
        assert_eq!(iteration_schedule(2, &custom), (0.0, -30.0));
    }

    #[test]
    fn invalid_orbits_rejected() {
        assert!(orbital_trajectory(&spec(1, (0.0, 45.0))).is_err());
        let mut degenerate = spec(3, (0.0, 45.0));
        degenerate.seed_position = degenerate.center;
        assert!(orbital_trajectory(&degenerate).is_err());
    }
}
