//! Experiment runners shared by the command line and the acceptance suite.
//!
//! Every run is a pure function of the scenario: sequences are independent
//! and run in parallel, results come back in sequence order.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufReader;

use aft_core::camera::CameraModel;
use aft_core::control::{chamber_pressures, run_closed_loop, ClosedLoopTrace, ControlTarget, Sensing, SimulatedPlant};
use aft_core::kinematics::{tip_position, RobotConfig};
use aft_core::matching::{GatedScores, Matching};
use aft_core::reconstruct::{compute_metrics, process_frame_detailed, AblationFlags, PipelineParams, Timings};
use aft_core::Vec3;
use aft_core::refmodel::{build_reference_model, read_model, ReferenceModel};
use aft_core::sim::{
    generate_surface, make_trajectory, reference_views, render_frame, viewpoint_camera, NoiseSpec, ObservedFrame,
    OcclusionBar, Surface,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{ControlTask, Scenario, Stream};

/// Backbone points used for the shape error.
pub const SHAPE_POINTS: usize = 8;

/// Scenario with its simulated robot surface and reference model.
#[derive(Clone, Debug)]
pub struct Setup {
    pub scenario: Scenario,
    pub surface: Surface,
    pub model: ReferenceModel,
}

/// Builds the reference model from simulated multi-view observations.
pub fn build_model(scenario: &Scenario, surface: &Surface) -> Result<ReferenceModel> {
    let r = &scenario.reference;
    let views = reference_views(surface, r.n_views, r.view_noise, scenario.seed_for(Stream::Views))?;
    Ok(build_reference_model(
        &surface.points,
        &views,
        &surface.rest_config,
        r.n_points,
        r.partitions,
        scenario.seed_for(Stream::Sampling),
    )?)
}

impl Setup {
    /// Generates the surface and builds (or loads) the reference model.
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let surface = generate_surface(&scenario.geometry, scenario.seed_for(Stream::Surface))?;
        let model = match &scenario.reference.model {
            Some(path) => {
                let file = File::open(path).map_err(|e| Error::io(path, e))?;
                let model = read_model(&mut BufReader::new(file))?;
                if model.n_partitions() != scenario.reference.partitions {
                    return Err(Error::Scenario(format!(
                        "model file has {} partitions, scenario asks for {}",
                        model.n_partitions(),
                        scenario.reference.partitions
                    )));
                }
                model
            }
            None => build_model(&scenario, &surface)?,
        };
        Ok(Self { scenario, surface, model })
    }

    pub fn camera(&self, viewpoint: &str) -> Result<CameraModel> {
        Ok(viewpoint_camera(viewpoint, self.scenario.camera.distance, self.scenario.geometry.length)?)
    }

    pub fn truth_sequence(&self, sequence: usize) -> Result<Vec<RobotConfig>> {
        let t = &self.scenario.trajectory;
        Ok(make_trajectory(
            &t.motion,
            t.n_frames,
            self.scenario.seed_for(Stream::Trajectory(sequence as u64)),
            &self.scenario.plant,
        )?)
    }

    pub fn noise(&self, sequence: usize) -> NoiseSpec {
        NoiseSpec { seed: self.scenario.seed_for(Stream::Noise(sequence as u64)), ..self.scenario.noise }
    }

    pub fn render_sequence(
        &self,
        sequence: usize,
        camera: &CameraModel,
        occlusion: &OcclusionBar,
    ) -> Result<Vec<ObservedFrame>> {
        let noise = self.noise(sequence);
        let dt = self.scenario.pipeline.dt;
        self.truth_sequence(sequence)?
            .iter()
            .enumerate()
            .map(|(f, truth)| {
                Ok(render_frame(&self.surface, truth, camera, occlusion, &noise, f as u64, f as f64 * dt)?)
            })
            .collect()
    }

    /// Renders and tracks one sequence from the rest-state model.
    pub fn run_sequence(
        &self,
        sequence: usize,
        camera: &CameraModel,
        occlusion: &OcclusionBar,
        pipeline: &PipelineParams,
        capture: Capture,
    ) -> Result<SequenceRun> {
        let frames = self.render_sequence(sequence, camera, occlusion)?;
        track_frames(&self.model, &frames, camera, pipeline, sequence, capture)
    }

    /// Runs `sequences` in parallel under one camera, occlusion and pipeline.
    pub fn run_sequences(
        &self,
        sequences: std::ops::Range<usize>,
        camera: &CameraModel,
        occlusion: &OcclusionBar,
        pipeline: &PipelineParams,
        capture: Capture,
    ) -> Result<Vec<SequenceRun>> {
        sequences
            .into_par_iter()
            .map(|s| self.run_sequence(s, camera, occlusion, pipeline, capture))
            .collect()
    }
}

/// Per-frame tracking result as written to `frames.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sequence: usize,
    pub frame: usize,
    pub timestamp: f64,
    /// Relative errors; absent when the frame carries no ground truth.
    pub tip_error: Option<f64>,
    pub shape_error: Option<f64>,
    pub tracking_lost: bool,
    pub n_visible: usize,
    pub n_observed: usize,
    pub n_pairs: usize,
    pub mean_score: f64,
    pub ik_iterations: usize,
    pub ik_converged: bool,
    /// Backbone fit objective, m^2.
    pub residual: f64,
    pub pair_counts: Vec<usize>,
    pub tip: Vec3,
    pub estimate: RobotConfig,
    pub truth: Option<RobotConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRun {
    pub records: Vec<FrameRecord>,
    pub timings: Vec<Timings>,
    /// Per-frame assignments, when captured.
    pub matchings: Vec<Matching>,
    /// Per-frame gated score matrices, when captured.
    pub scores: Vec<GatedScores>,
}

/// Optional per-frame data kept by [`track_frames`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    pub matchings: bool,
    pub scores: bool,
}

/// Tracks `frames` starting from a fresh copy of `model`.
pub fn track_frames(
    model: &ReferenceModel,
    frames: &[ObservedFrame],
    camera: &CameraModel,
    pipeline: &PipelineParams,
    sequence: usize,
    capture: Capture,
) -> Result<SequenceRun> {
    let mut model = model.clone();
    let mut run = SequenceRun {
        records: Vec::with_capacity(frames.len()),
        timings: Vec::with_capacity(frames.len()),
        matchings: Vec::new(),
        scores: Vec::new(),
    };
    for (f, frame) in frames.iter().enumerate() {
        let detail = process_frame_detailed(&mut model, frame, camera, pipeline)?;
        let result = detail.result;
        let metrics = frame.truth.as_ref().map(|t| compute_metrics(&result.config, t, SHAPE_POINTS)).transpose()?;
        run.records.push(FrameRecord {
            sequence,
            frame: f,
            timestamp: frame.timestamp,
            tip_error: metrics.map(|m| m.tip_error),
            shape_error: metrics.map(|m| m.shape_error),
            tracking_lost: result.tracking_lost,
            n_visible: result.n_visible,
            n_observed: result.n_observed,
            n_pairs: result.n_pairs(),
            mean_score: result.mean_score,
            ik_iterations: result.ik_iterations,
            ik_converged: result.ik_converged,
            residual: result.residual,
            pair_counts: result.pair_counts,
            tip: result.tip,
            estimate: result.config,
            truth: frame.truth.clone(),
        });
        run.timings.push(result.timings);
        if capture.matchings {
            run.matchings.push(detail.matching);
        }
        if capture.scores {
            run.scores.push(detail.scores);
        }
    }
    Ok(run)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let values: Vec<f64> = values.into_iter().collect();
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std: var.sqrt(), n }
    }
}

fn records(runs: &[SequenceRun]) -> impl Iterator<Item = &FrameRecord> {
    runs.iter().flat_map(|r| &r.records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub n_sequences: usize,
    pub n_frames: usize,
    pub tip_error: Stats,
    pub shape_error: Stats,
    /// Errors on the last frame of every sequence.
    pub final_tip_error: Stats,
    pub lost_frames: usize,
}

impl TrackSummary {
    pub fn of(runs: &[SequenceRun]) -> Self {
        Self {
            n_sequences: runs.len(),
            n_frames: records(runs).count(),
            tip_error: Stats::of(records(runs).filter_map(|r| r.tip_error)),
            shape_error: Stats::of(records(runs).filter_map(|r| r.shape_error)),
            final_tip_error: Stats::of(runs.iter().filter_map(|r| r.records.last()?.tip_error)),
            lost_frames: records(runs).filter(|r| r.tracking_lost).count(),
        }
    }
}

/// Wall-clock statistics; never part of the deterministic outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSummary {
    /// Seconds per frame for the whole pipeline.
    pub per_frame: Stats,
    /// Mean seconds per frame and stage.
    pub stages: Timings,
}

impl RuntimeSummary {
    pub fn of(runs: &[SequenceRun]) -> Self {
        let all: Vec<&Timings> = runs.iter().flat_map(|r| &r.timings).collect();
        let n = all.len().max(1) as f64;
        let mean = |f: fn(&Timings) -> f64| all.iter().map(|t| f(t)).sum::<f64>() / n;
        Self {
            per_frame: Stats::of(all.iter().map(|t| t.total)),
            stages: Timings {
                visibility: mean(|t| t.visibility),
                scoring: mean(|t| t.scoring),
                registration: mean(|t| t.registration),
                backbone: mean(|t| t.backbone),
                update: mean(|t| t.update),
                total: mean(|t| t.total),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionCell {
    pub position: f64,
    pub width: f64,
    pub tip_error: Stats,
    pub shape_error: Stats,
    pub lost_frames: usize,
}

/// Mean errors over the scenario's (position, width) grid; every cell runs
/// the same sequences. A zero-width bar removes nothing, so all zero-width
/// cells share one unoccluded run.
pub fn sweep_occlusion(setup: &Setup) -> Result<Vec<OcclusionCell>> {
    let sweeps = &setup.scenario.sweeps;
    let camera = setup.camera(&setup.scenario.camera.viewpoint)?;
    let bars: Vec<OcclusionBar> = sweeps
        .occlusion_positions
        .iter()
        .flat_map(|&position| sweeps.occlusion_widths.iter().map(move |&width| OcclusionBar { position, width }))
        .collect();
    // Index of the run each bar uses.
    let mut distinct: Vec<OcclusionBar> = Vec::new();
    let source: Vec<usize> = bars
        .iter()
        .map(|bar| {
            let same = |d: &OcclusionBar| d == bar || (d.width == 0.0 && bar.width == 0.0);
            distinct.iter().position(same).unwrap_or_else(|| {
                distinct.push(*bar);
                distinct.len() - 1
            })
        })
        .collect();
    let n = sweeps.occlusion_sequences;
    let jobs: Vec<(usize, usize)> = (0..distinct.len()).flat_map(|b| (0..n).map(move |s| (b, s))).collect();
    let runs: Vec<SequenceRun> = jobs
        .par_iter()
        .map(|&(b, s)| setup.run_sequence(s, &camera, &distinct[b], &setup.scenario.pipeline, Capture::default()))
        .collect::<Result<_>>()?;
    Ok(bars
        .iter()
        .zip(&source)
        .map(|(bar, &b)| {
            let summary = TrackSummary::of(&runs[b * n..(b + 1) * n]);
            OcclusionCell {
                position: bar.position,
                width: bar.width,
                tip_error: summary.tip_error,
                shape_error: summary.shape_error,
                lost_frames: summary.lost_frames,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointRow {
    pub viewpoint: String,
    pub tip_error: Stats,
    pub shape_error: Stats,
}

/// Tip agreement between two viewpoints on the same frames, relative to `L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointPair {
    pub a: String,
    pub b: String,
    /// Over every frame.
    pub tip_distance: Stats,
    /// Over the final (target) frame of every sequence.
    pub final_tip_distance: Stats,
    pub final_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSweep {
    pub rows: Vec<ViewpointRow>,
    pub overall: ViewpointRow,
    pub pairs: Vec<ViewpointPair>,
}

/// Runs the same sequences from every viewpoint.
pub fn sweep_viewpoint(setup: &Setup) -> Result<ViewpointSweep> {
    let sweeps = &setup.scenario.sweeps;
    let n = sweeps.viewpoint_sequences;
    let length = setup.scenario.geometry.length;
    let runs: Vec<Vec<SequenceRun>> = sweeps
        .viewpoints
        .iter()
        .map(|v| {
            let camera = setup.camera(v)?;
            setup.run_sequences(0..n, &camera, &setup.scenario.occlusion, &setup.scenario.pipeline, Capture::default())
        })
        .collect::<Result<_>>()?;
    let row = |viewpoint: &str, runs: &[SequenceRun]| {
        let s = TrackSummary::of(runs);
        ViewpointRow { viewpoint: viewpoint.to_string(), tip_error: s.tip_error, shape_error: s.shape_error }
    };
    let rows = sweeps.viewpoints.iter().zip(&runs).map(|(v, r)| row(v, r)).collect();
    let all: Vec<SequenceRun> = runs.iter().flatten().cloned().collect();
    let mut pairs = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let distance = |a: &FrameRecord, b: &FrameRecord| {
                (tip_position(&a.estimate) - tip_position(&b.estimate)).norm() / length
            };
            let every = runs[i].iter().zip(&runs[j]).flat_map(|(a, b)| a.records.iter().zip(&b.records));
            let finals: Vec<f64> = runs[i]
                .iter()
                .zip(&runs[j])
                .filter_map(|(a, b)| Some(distance(a.records.last()?, b.records.last()?)))
                .collect();
            pairs.push(ViewpointPair {
                a: sweeps.viewpoints[i].clone(),
                b: sweeps.viewpoints[j].clone(),
                tip_distance: Stats::of(every.map(|(a, b)| distance(a, b))),
                final_max: finals.iter().copied().fold(0.0, f64::max),
                final_tip_distance: Stats::of(finals),
            });
        }
    }
    Ok(ViewpointSweep { rows, overall: row("overall", &all), pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub flags: AblationFlags,
    pub tip_error: Stats,
    pub shape_error: Stats,
    pub lost_frames: usize,
    /// Seconds per frame; reported separately from the deterministic table.
    #[serde(skip)]
    pub runtime: Stats,
}

/// The four ablation configurations in report order.
pub fn ablation_configurations() -> Vec<(&'static str, AblationFlags)> {
    let none = AblationFlags::default();
    vec![
        ("full", none),
        ("w/o multi-scale", AblationFlags { geometry_only: true, ..none }),
        ("w/o feature update", AblationFlags { no_descriptor_update: true, ..none }),
        ("w/o hierarchical", AblationFlags { direct_ik: true, ..none }),
    ]
}

/// Runs every ablation configuration on the same sequences. Configurations
/// run one after another so their per-frame runtimes are comparable.
pub fn ablate(setup: &Setup) -> Result<Vec<AblationRow>> {
    let camera = setup.camera(&setup.scenario.camera.viewpoint)?;
    let n = setup.scenario.sweeps.ablation_sequences;
    ablation_configurations()
        .into_iter()
        .map(|(name, flags)| {
            let pipeline = PipelineParams { ablation: flags, ..setup.scenario.pipeline.clone() };
            let runs = setup.run_sequences(0..n, &camera, &setup.scenario.occlusion, &pipeline, Capture::default())?;
            let summary = TrackSummary::of(&runs);
            Ok(AblationRow {
                configuration: name.to_string(),
                flags,
                tip_error: summary.tip_error,
                shape_error: summary.shape_error,
                lost_frames: summary.lost_frames,
                runtime: RuntimeSummary::of(&runs).per_frame,
            })
        })
        .collect()
}

/// The scenario's explicit target, or `n_targets` random reachable ones.
///
/// Shape targets draw curvatures from `kappa_range` and directions uniformly.
/// Tip targets are the tips the plant reaches under pressures of the
/// controller's own form (a magnitude spread by the angular weighting), so
/// the controller can in principle reach them exactly.
pub fn control_targets(scenario: &Scenario, task: ControlTask) -> Result<Vec<ControlTarget>> {
    let c = &scenario.control;
    if let Some(t) = &c.target {
        return Ok(vec![t.clone()]);
    }
    let n_segments = scenario.plant.n_segments();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed_for(Stream::ControlTargets));
    (0..c.n_targets)
        .map(|_| match task {
            ControlTask::Shape => {
                let kappa = (0..n_segments).map(|_| rng.random_range(c.kappa_range[0]..=c.kappa_range[1])).collect();
                let phi = (0..n_segments).map(|_| rng.random_range(-PI..PI)).collect();
                Ok(ControlTarget::Shape { kappa, phi })
            }
            ControlTask::Tip => {
                let mut pressures = Vec::with_capacity(3 * n_segments);
                for _ in 0..n_segments {
                    let u = rng.random_range(c.pressure_range[0]..=c.pressure_range[1]);
                    pressures.extend(chamber_pressures(u, rng.random_range(-PI..PI)));
                }
                Ok(ControlTarget::Tip { position: tip_position(&scenario.plant.config(&pressures)?) })
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub target: ControlTarget,
    /// Mean over the final steps, relative to `L`.
    pub steady_shape_error: f64,
    pub steady_tip_error: f64,
    pub saturated_steps: usize,
    pub lost_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlRun {
    pub summary: ControlSummary,
    pub trace: ClosedLoopTrace,
}

/// Closed-loop runs against the simulated plant, one per target.
pub fn run_control(setup: &Setup, targets: &[ControlTarget]) -> Result<Vec<ControlRun>> {
    let scenario = &setup.scenario;
    let camera = setup.camera(&scenario.camera.viewpoint)?;
    targets
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            let sensing = Sensing {
                surface: &setup.surface,
                camera: &camera,
                noise: setup.noise(i),
                occlusion: scenario.occlusion,
                pipeline: scenario.pipeline.clone(),
            };
            let mut plant = SimulatedPlant::new(scenario.plant.clone(), scenario.control.time_constant)?;
            let mut model = setup.model.clone();
            let trace = run_closed_loop(&mut plant, &mut model, &sensing, target, &scenario.control.params)?;
            let (steady_shape_error, steady_tip_error) = trace.steady_state();
            let summary = ControlSummary {
                target: target.clone(),
                steady_shape_error,
                steady_tip_error,
                saturated_steps: trace.steps.iter().filter(|s| s.saturated).count(),
                lost_steps: trace.steps.iter().filter(|s| s.tracking_lost).count(),
            };
            Ok(ControlRun { summary, trace })
        })
        .collect()
}
