//! Scenario files: everything an experiment needs, with explicit seeds.

use std::fs;
use std::path::{Path, PathBuf};

use aft_core::control::{ControlParams, ControlTarget};
use aft_core::reconstruct::{AblationFlags, PipelineParams};
use aft_core::sim::{mix_seed, NoiseSpec, OcclusionBar, PressurePlant, RobotGeometry, TrajectoryKind, VIEWPOINTS};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub geometry: RobotGeometry,
    pub reference: ReferenceSpec,
    pub camera: CameraSpec,
    pub trajectory: TrajectorySpec,
    /// Noise levels; the seed field is ignored and replaced per sequence.
    pub noise: NoiseSpec,
    pub occlusion: OcclusionBar,
    pub plant: PressurePlant,
    pub pipeline: PipelineParams,
    pub sweeps: SweepSpec,
    pub control: ControlSpec,
    /// Also write every rendered frame to `<out>/frames` for `replay`.
    pub export_frames: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            geometry: RobotGeometry::default(),
            reference: ReferenceSpec::default(),
            camera: CameraSpec::default(),
            trajectory: TrajectorySpec::default(),
            noise: NoiseSpec::default(),
            occlusion: OcclusionBar::none(),
            plant: PressurePlant::default(),
            pipeline: PipelineParams::default(),
            sweeps: SweepSpec::default(),
            control: ControlSpec::default(),
            export_frames: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    /// Views aggregated per reference descriptor.
    pub n_views: usize,
    /// Descriptor noise of every reference view.
    pub view_noise: f64,
    /// Points kept by farthest point sampling.
    pub n_points: usize,
    pub partitions: usize,
    /// Load the model from this file instead of building it.
    pub model: Option<PathBuf>,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self { n_views: 8, view_noise: 0.05, n_points: 2000, partitions: 4, model: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub viewpoint: String,
    /// Distance from the robot axis, m.
    pub distance: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { viewpoint: "front".into(), distance: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub n_sequences: usize,
    pub n_frames: usize,
    pub motion: TrajectoryKind,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self { n_sequences: 50, n_frames: 15, motion: TrajectoryKind::RandomPressures { n_sets: 1 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub occlusion_positions: Vec<f64>,
    pub occlusion_widths: Vec<f64>,
    /// Sequences per occlusion cell.
    pub occlusion_sequences: usize,
    pub viewpoints: Vec<String>,
    /// Sequences per viewpoint.
    pub viewpoint_sequences: usize,
    /// Sequences per ablation configuration.
    pub ablation_sequences: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            occlusion_positions: vec![0.3, 0.5, 0.7],
            occlusion_widths: vec![0.0, 0.1, 0.2, 0.3],
            occlusion_sequences: 20,
            viewpoints: VIEWPOINTS.iter().map(|(n, _)| n.to_string()).collect(),
            viewpoint_sequences: 10,
            ablation_sequences: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlTask {
    Shape,
    Tip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSpec {
    pub task: ControlTask,
    /// Explicit target; when absent `n_targets` random reachable targets are drawn.
    pub target: Option<ControlTarget>,
    pub n_targets: usize,
    pub params: ControlParams,
    /// Pneumatic time constant of the simulated plant, s.
    pub time_constant: f64,
    /// Curvature range of random shape targets, 1/m.
    pub kappa_range: [f64; 2],
    /// Pressure magnitude range used to draw random tip targets, kPa.
    pub pressure_range: [f64; 2],
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self {
            task: ControlTask::Shape,
            target: None,
            n_targets: 20,
            params: ControlParams::default(),
            time_constant: 1.0,
            kappa_range: [0.5, 2.5],
            pressure_range: [10.0, 45.0],
        }
    }
}

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Surface,
    Views,
    Sampling,
    Trajectory(u64),
    Noise(u64),
    ControlTargets,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scenario: Scenario =
            serde_json::from_str(&text).map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        let (a, b) = match stream {
            Stream::Surface => (1, 0),
            Stream::Views => (2, 0),
            Stream::Sampling => (3, 0),
            Stream::Trajectory(s) => (10, s),
            Stream::Noise(s) => (11, s),
            Stream::ControlTargets => (12, 0),
        };
        mix_seed(self.seed, a, b)
    }

    /// Checks everything that can be checked before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Scenario(msg));
        self.geometry.validate()?;
        self.pipeline.validate()?;
        self.noise.validate()?;
        self.occlusion.validate()?;
        self.control.params.gains.validate()?;
        let r = &self.reference;
        if r.partitions < 2 {
            return bad(format!("reference.partitions must be at least 2, got {}", r.partitions));
        }
        if r.n_views == 0 || r.n_points < r.partitions {
            return bad("reference needs at least one view and one point per partition".into());
        }
        if let Some(path) = &r.model {
            if !path.is_file() {
                return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "model file not found")));
            }
        }
        let known = |name: &str| VIEWPOINTS.iter().any(|(n, _)| *n == name);
        for name in std::iter::once(&self.camera.viewpoint).chain(&self.sweeps.viewpoints) {
            if !known(name) {
                return bad(format!(
                    "unknown viewpoint '{name}', expected one of {:?}",
                    VIEWPOINTS.iter().map(|(n, _)| *n).collect::<Vec<_>>()
                ));
            }
        }
        if !(self.camera.distance > 0.0) {
            return bad("camera.distance must be positive".into());
        }
        if self.trajectory.n_frames == 0 {
            return bad("trajectory.n_frames must be at least 1".into());
        }
        if self.plant.n_segments() != self.geometry.n_segments {
            return bad("plant and geometry disagree in segment count".into());
        }
        for p in &self.sweeps.occlusion_positions {
            for w in &self.sweeps.occlusion_widths {
                OcclusionBar { position: *p, width: *w }.validate()?;
            }
        }
        let c = &self.control;
        if !(c.time_constant >= 0.0) || c.kappa_range[0] > c.kappa_range[1] || c.pressure_range[0] > c.pressure_range[1] {
            return bad("control ranges must be ordered and the time constant non-negative".into());
        }
        if let Some(t) = &c.target {
            t.validate(self.geometry.n_segments)?;
        }
        Ok(())
    }

    /// Applies a comma-separated ablation list such as `geometry-only,direct-ik`.
    pub fn apply_ablations(&mut self, list: &str) -> Result<()> {
        for flag in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let flags = &mut self.pipeline.ablation;
            match flag {
                "geometry-only" => flags.geometry_only = true,
                "no-descriptor-update" => flags.no_descriptor_update = true,
                "direct-ik" => flags.direct_ik = true,
                "none" => *flags = AblationFlags::default(),
                other => {
                    return Err(Error::Scenario(format!(
                        "unknown ablation '{other}', expected geometry-only, no-descriptor-update, direct-ik or none"
                    )))
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let s: Scenario = serde_json::from_str("{}").unwrap();
        assert_eq!(s, Scenario::default());
        s.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let mut s = Scenario::default();
        s.control.target = Some(ControlTarget::Shape { kappa: vec![1.0, 2.0], phi: vec![0.0, 1.0] });
        let back: Scenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_single_partition_and_unknown_fields() {
        let s: Scenario = serde_json::from_str(r#"{"reference": {"partitions": 1}}"#).unwrap();
        assert!(matches!(s.validate(), Err(Error::Scenario(_))));
        assert!(serde_json::from_str::<Scenario>(r#"{"seeed": 3}"#).is_err());
    }

    #[test]
    fn ablation_flags() {
        let mut s = Scenario::default();
        s.apply_ablations("geometry-only, direct-ik").unwrap();
        assert!(s.pipeline.ablation.geometry_only && s.pipeline.ablation.direct_ik);
        assert!(!s.pipeline.ablation.no_descriptor_update);
        assert!(s.apply_ablations("no-multiscale").is_err());
    }

    #[test]
    fn streams_are_distinct() {
        let s = Scenario::default();
        let seeds = [
            s.seed_for(Stream::Surface),
            s.seed_for(Stream::Views),
            s.seed_for(Stream::Sampling),
            s.seed_for(Stream::Trajectory(0)),
            s.seed_for(Stream::Trajectory(1)),
            s.seed_for(Stream::Noise(0)),
            s.seed_for(Stream::ControlTargets),
        ];
        let unique: std::collections::HashSet<_> = seeds.iter().collect();
        assert_eq!(unique.len(), seeds.len());
    }
}
