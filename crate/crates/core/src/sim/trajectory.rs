//! Ground-truth pressure plant, configuration trajectories and viewpoints.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mix_seed;
use crate::camera::CameraModel;
use crate::error::{invalid, Error, Result};
use crate::kinematics::{
    pressures_to_lengths, PressureModel, RobotConfig, SegmentConfig, SegmentPressureModel,
    CHAMBERS_PER_SEGMENT, MAX_PRESSURE_KPA,
};
use crate::Vec3;

/// Chamber directions around the segment axis, rad.
pub const CHAMBER_ANGLES: [f64; CHAMBERS_PER_SEGMENT] = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

/// Synthetic ground-truth map from chamber pressures to configuration.
///
/// Per segment the pressure vector `v = sum_c P_c (cos theta_c, sin theta_c)`
/// sets the bending direction `phi = atan2(v)` and curvature
/// `kappa = kappa_gain |v|`; lengths follow a linear pressure model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PressurePlant {
    /// Curvature per kPa of pressure imbalance, 1/(m kPa).
    pub kappa_gain: f64,
    pub lengths: PressureModel,
}

impl Default for PressurePlant {
    fn default() -> Self {
        Self::new(&[0.2, 0.2], 0.06, 1e-4)
    }
}

impl PressurePlant {
    /// Plant with nominal lengths `l0` and every chamber elongating its segment by `length_gain` m/kPa.
    pub fn new(l0: &[f64], kappa_gain: f64, length_gain: f64) -> Self {
        let segments = l0.iter().map(|&l0| SegmentPressureModel { k: [length_gain; 3], l0 }).collect();
        Self { kappa_gain, lengths: PressureModel { segments } }
    }

    pub fn n_segments(&self) -> usize {
        self.lengths.segments.len()
    }

    pub fn nominal_lengths(&self) -> Vec<f64> {
        self.lengths.segments.iter().map(|s| s.l0).collect()
    }

    /// Configuration reached under `pressures` (kPa, clamped to the admissible box).
    pub fn config(&self, pressures: &[f64]) -> Result<RobotConfig> {
        let lengths = pressures_to_lengths(&self.lengths, pressures)?.lengths;
        let segments = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let (mut x, mut y) = (0.0, 0.0);
                for (c, theta) in CHAMBER_ANGLES.iter().enumerate() {
                    let p = pressures[CHAMBERS_PER_SEGMENT * i + c].clamp(0.0, MAX_PRESSURE_KPA);
                    x += p * theta.cos();
                    y += p * theta.sin();
                }
                let kappa = self.kappa_gain * x.hypot(y);
                // Exactly balanced chambers leave the direction undefined.
                let phi = if kappa < 1e-9 { 0.0 } else { y.atan2(x) };
                SegmentConfig::new(kappa, phi, l)
            })
            .collect();
        Ok(RobotConfig::new(segments))
    }
}

/// Pressure sets with every chamber uniform in `[0, 100]` kPa and zeroed with probability 0.3.
pub fn random_pressure_sets(n_sets: usize, n_chambers: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9E55, 0));
    (0..n_sets)
        .map(|_| {
            (0..n_chambers)
                .map(|_| {
                    let p = rng.random_range(0.0..MAX_PRESSURE_KPA);
                    if rng.random::<f64>() < 0.3 { 0.0 } else { p }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// `from` at frame 0, `to` afterwards.
    Step { from: RobotConfig, to: RobotConfig },
    /// Linear interpolation in `(kappa, phi, l)` from `from` to `to`.
    Ramp { from: RobotConfig, to: RobotConfig },
    /// Pressures move linearly from zero through `n_sets` random sets; every
    /// frame is mapped through the plant.
    RandomPressures { n_sets: usize },
}

fn lerp_config(a: &RobotConfig, b: &RobotConfig, t: f64) -> RobotConfig {
    RobotConfig::new(
        a.segments
            .iter()
            .zip(&b.segments)
            .map(|(x, y)| {
                SegmentConfig::new(
                    x.kappa + t * (y.kappa - x.kappa),
                    x.phi + t * (y.phi - x.phi),
                    x.length + t * (y.length - x.length),
                )
            })
            .collect(),
    )
}

/// Ground-truth configuration for every frame.
pub fn make_trajectory(kind: &TrajectoryKind, n_frames: usize, seed: u64, plant: &PressurePlant) -> Result<Vec<RobotConfig>> {
    if n_frames == 0 {
        return Err(invalid("trajectory needs at least one frame"));
    }
    let denom = (n_frames - 1).max(1) as f64;
    match kind {
        TrajectoryKind::Step { from, to } | TrajectoryKind::Ramp { from, to } => {
            if from.segments.len() != to.segments.len() {
                return Err(invalid("trajectory endpoints differ in segment count"));
            }
            let step = matches!(kind, TrajectoryKind::Step { .. });
            Ok((0..n_frames)
                .map(|t| match (step, t) {
                    (_, 0) => from.clone(),
                    (true, _) => to.clone(),
                    (false, _) => lerp_config(from, to, t as f64 / denom),
                })
                .collect())
        }
        TrajectoryKind::RandomPressures { n_sets } => {
            if *n_sets == 0 {
                return Err(invalid("random-pressure trajectory needs at least one set"));
            }
            let chambers = CHAMBERS_PER_SEGMENT * plant.n_segments();
            let mut waypoints = vec![vec![0.0; chambers]];
            waypoints.extend(random_pressure_sets(*n_sets, chambers, seed));
            (0..n_frames)
                .map(|t| {
                    let tau = t as f64 / denom * *n_sets as f64;
                    let k = (tau.floor() as usize).min(n_sets - 1);
                    let frac = tau - k as f64;
                    let p: Vec<f64> = waypoints[k]
                        .iter()
                        .zip(&waypoints[k + 1])
                        .map(|(a, b)| a + frac * (b - a))
                        .collect();
                    plant.config(&p)
                })
                .collect()
        }
    }
}

/// Named viewpoints and their azimuths in degrees.
pub const VIEWPOINTS: [(&str, f64); 4] =
    [("front", 0.0), ("front-right", -35.0), ("front-left", 35.0), ("side-left", 80.0)];

/// Camera at a named azimuth, `distance` m from the robot axis at mid-height,
/// looking at the mid-point with the robot hanging down the image.
///
/// Intrinsics correspond to a 640x480 sensor scaled to the 256x192 working resolution.
pub fn viewpoint_camera(name: &str, distance: f64, robot_length: f64) -> Result<CameraModel> {
    let azimuth = VIEWPOINTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, a)| a.to_radians())
        .ok_or_else(|| Error::UnknownViewpoint(name.to_string()))?;
    if !(distance > 0.0) {
        return Err(invalid("camera distance must be positive"));
    }
    let target = Vec3::new(0.0, 0.0, 0.5 * robot_length);
    let eye = target + distance * Vec3::new(azimuth.cos(), azimuth.sin(), 0.0);
    CameraModel::look_at((246.0, 246.0, 128.0, 96.0), (256, 192), eye, target, Vec3::z())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_fraction_matches_protocol() {
        let sets = random_pressure_sets(10_000, 6, 11);
        for c in 0..6 {
            let zeros = sets.iter().filter(|s| s[c] == 0.0).count() as f64 / 1e4;
            assert!((zeros - 0.3).abs() < 0.05, "chamber {c}: {zeros}");
        }
        assert!(sets.iter().flatten().all(|p| (0.0..100.0).contains(p)));
        assert_eq!(sets, random_pressure_sets(10_000, 6, 11));
    }

    #[test]
    fn plant_direction_and_rest() {
        let plant = PressurePlant::default();
        let rest = plant.config(&[0.0; 6]).unwrap();
        assert_eq!(rest, RobotConfig::straight(&[0.2, 0.2]));
        let c = plant.config(&[50.0, 0.0, 0.0, 0.0, 40.0, 40.0]).unwrap();
        assert_abs_diff_eq!(c.segments[0].kappa, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.segments[0].phi, 0.0, epsilon = 1e-12);
        // Chambers at 120 and 240 degrees pull toward 180 degrees.
        assert_abs_diff_eq!(c.segments[1].phi.abs(), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(c.segments[1].kappa, 0.06 * 40.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.segments[1].length, 0.2 + 80.0 * 1e-4, epsilon = 1e-15);
    }

    #[test]
    fn ramp_and_step() {
        let plant = PressurePlant::default();
        let rest = RobotConfig::straight(&[0.2, 0.2]);
        let flat = make_trajectory(&TrajectoryKind::Ramp { from: rest.clone(), to: rest.clone() }, 5, 0, &plant).unwrap();
        assert!(flat.iter().all(|c| *c == rest));
        let target = plant.config(&[30.0, 0.0, 10.0, 0.0, 60.0, 0.0]).unwrap();
        let step = make_trajectory(&TrajectoryKind::Step { from: rest.clone(), to: target.clone() }, 6, 0, &plant).unwrap();
        assert_eq!(step[0], rest);
        assert!(step[1..].iter().all(|c| *c == target));
        let ramp = make_trajectory(&TrajectoryKind::Ramp { from: rest.clone(), to: target.clone() }, 6, 0, &plant).unwrap();
        assert_eq!(ramp[5], target);
    }

    #[test]
    fn random_pressure_trajectory_starts_at_rest() {
        let plant = PressurePlant::default();
        let t = make_trajectory(&TrajectoryKind::RandomPressures { n_sets: 2 }, 9, 4, &plant).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t[0], RobotConfig::straight(&[0.2, 0.2]));
        assert_eq!(t, make_trajectory(&TrajectoryKind::RandomPressures { n_sets: 2 }, 9, 4, &plant).unwrap());
    }

    #[test]
    fn viewpoints() {
        let front = viewpoint_camera("front", 0.7, 0.4).unwrap();
        for z in [0.05, 0.2, 0.35] {
            let p = front.project(&Vec3::new(0.0, 0.0, z)).unwrap();
            assert_abs_diff_eq!(p.u, 128.0, epsilon = 1e-9);
        }
        let right = viewpoint_camera("front-right", 0.7, 0.4).unwrap();
        let left = viewpoint_camera("front-left", 0.7, 0.4).unwrap();
        let mirror = |v: Vec3| Vec3::new(v.x, -v.y, v.z);
        assert_abs_diff_eq!(right.eye(), mirror(left.eye()), epsilon = 1e-12);
        let x = Vec3::new(0.03, 0.02, 0.3);
        let (pr, pl) = (right.project(&x).unwrap(), left.project(&mirror(x)).unwrap());
        assert_abs_diff_eq!(pr.u, 256.0 - pl.u, epsilon = 1e-9);
        assert_abs_diff_eq!(pr.v, pl.v, epsilon = 1e-9);
        assert!(matches!(viewpoint_camera("top", 0.7, 0.4), Err(Error::UnknownViewpoint(_))));
    }
}
