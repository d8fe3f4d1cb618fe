//! Hierarchical shape reconstruction.
//!
//! Each frame the matched pairs of every partition yield a rigid motion of
//! that partition; the moved partition base points then drive a backbone
//! fit, and the fitted configuration moves the whole reference model.

mod registration;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, VisibilityParams};
use crate::error::{Error, Result};
use crate::kinematics::{
    carry_offset, forward_kinematics, inverse_kinematics, material_pose, tip_position, FeasibleDomain,
    IkOptions, IkSolution, IkTarget, RobotConfig,
};
use crate::matching::{match_frame, update_descriptors, visible_reference_points, GatedScores, Matching, ScoreParams};
use crate::refmodel::ReferenceModel;
use crate::sim::ObservedFrame;
use crate::Vec3;

pub use registration::{estimate_partition_transform, Registration, RigidTransform};

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Match on distance only, ignoring descriptors.
    pub geometry_only: bool,
    /// Keep reference descriptors frozen.
    pub no_descriptor_update: bool,
    /// Fit the backbone directly to every matched pair instead of partition motions.
    pub direct_ik: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub score: ScoreParams,
    pub visibility: VisibilityParams,
    /// Descriptor update rate, 1/s.
    pub alpha: f64,
    /// Frame interval used for the update weight, s.
    pub dt: f64,
    pub renormalize: bool,
    /// Fewest pairs for a partition to count as resolved.
    pub min_pairs: usize,
    pub kappa_max: f64,
    /// Admissible segment length range as multiples of the nominal length.
    pub length_range: [f64; 2],
    pub ik: IkOptions,
    /// Most correspondence rounds of the direct-IK baseline.
    pub direct_ik_rounds: usize,
    /// Tip motion, m, below which the direct-IK baseline stops.
    pub direct_ik_tolerance: f64,
    pub ablation: AblationFlags,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            score: ScoreParams::default(),
            visibility: VisibilityParams::default(),
            alpha: 0.1,
            dt: 0.4,
            renormalize: true,
            min_pairs: 3,
            kappa_max: 20.0,
            length_range: [0.9, 1.3],
            ik: IkOptions::default(),
            direct_ik_rounds: 20,
            direct_ik_tolerance: 1e-6,
            ablation: AblationFlags::default(),
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        self.score.validate()?;
        let [lo, hi] = self.length_range;
        if !(self.kappa_max > 0.0 && lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::InvalidArgument("invalid feasible domain".into()));
        }
        if self.min_pairs < 3 {
            return Err(Error::InvalidArgument("partitions need at least 3 pairs".into()));
        }
        if !(self.dt >= 0.0) {
            return Err(Error::InvalidArgument("frame interval must be non-negative".into()));
        }
        if !(self.direct_ik_tolerance >= 0.0) {
            return Err(Error::InvalidArgument("direct-IK tolerance must be non-negative".into()));
        }
        Ok(())
    }

    /// Feasible domain around the model's nominal segment lengths.
    pub fn domain(&self, nominal: &[f64]) -> FeasibleDomain {
        FeasibleDomain {
            kappa_max: self.kappa_max,
            nominal_lengths: nominal.to_vec(),
            length_min: nominal.iter().map(|l| self.length_range[0] * l).collect(),
            length_max: nominal.iter().map(|l| self.length_range[1] * l).collect(),
        }
    }
}

/// Wall-clock seconds spent in every stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub visibility: f64,
    pub scoring: f64,
    pub registration: f64,
    pub backbone: f64,
    pub update: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    /// Estimated configuration (the previous one when tracking was lost).
    pub config: RobotConfig,
    /// Partition motions; `None` for unresolved partitions.
    pub transforms: Vec<Option<RigidTransform>>,
    /// Matched pairs per partition.
    pub pair_counts: Vec<usize>,
    pub n_visible: usize,
    pub n_observed: usize,
    pub mean_score: f64,
    /// Backbone fit objective, m^2.
    pub residual: f64,
    pub tip: Vec3,
    pub ik_iterations: usize,
    pub ik_converged: bool,
    pub tracking_lost: bool,
    pub timings: Timings,
}

impl FrameResult {
    pub fn n_pairs(&self) -> usize {
        self.pair_counts.iter().sum()
    }
}

/// Fits the backbone to the moved base points of the resolved partitions.
///
/// Target `j` is `T_j(X_j)`, where `X_j` is the backbone point at the base
/// coordinate of partition `j` in the model's current configuration. The
/// fit is warm-started from the current configuration.
pub fn global_backbone_fit(
    model: &ReferenceModel,
    transforms: &[(usize, RigidTransform)],
    domain: &FeasibleDomain,
    options: &IkOptions,
) -> Result<IkSolution> {
    if transforms.len() < 2 {
        return Err(Error::TrackingLoss(format!(
            "{} resolved partitions, need at least 2",
            transforms.len()
        )));
    }
    let targets = transforms
        .iter()
        .map(|(j, t)| {
            Ok(IkTarget { sigma: model.partitions.base_sigmas[*j], position: t.apply(&model.base_point(*j)?) })
        })
        .collect::<Result<Vec<_>>>()?;
    inverse_kinematics(&targets, &model.current_config, domain, options)
}

/// Backbone fit of every matched pair under `estimate`.
///
/// Each pair's surface offset is removed with the backbone frame of the
/// estimate, so the targets are backbone points at the pairs' coordinates.
fn fit_all_pairs(
    model: &ReferenceModel,
    matching: &Matching,
    frame: &ObservedFrame,
    estimate: &RobotConfig,
    domain: &FeasibleDomain,
    options: &IkOptions,
) -> Result<IkSolution> {
    if matching.pairs.len() < 3 {
        return Err(Error::TrackingLoss(format!("{} matched pairs", matching.pairs.len())));
    }
    let nominal = model.nominal_lengths();
    let targets = matching
        .pairs
        .iter()
        .map(|p| {
            let point = &model.points[p.reference];
            let rest = forward_kinematics(&model.rest_config, point.sigma)?;
            let pose = material_pose(estimate, &nominal, point.sigma)?;
            let offset = carry_offset(&rest, &pose, &point.rest_position) - pose.position;
            Ok(IkTarget { sigma: point.sigma, position: frame.points[p.observed].position - offset })
        })
        .collect::<Result<Vec<_>>>()?;
    inverse_kinematics(&targets, estimate, domain, options)
}

/// Baseline without partitions, in the manner of ICP: correspondences and
/// the backbone fit alternate.
///
/// Every round moves a copy of the model to the current estimate, recomputes
/// visibility, scores and the assignment there, and refits the backbone to
/// all matched pairs. Rounds stop once the correspondences repeat or the tip
/// moves less than `params.direct_ik_tolerance`. Returns the fit, the
/// matching it used, its scores and the visible point count.
pub fn direct_backbone_fit(
    model: &ReferenceModel,
    frame: &ObservedFrame,
    camera: &CameraModel,
    params: &PipelineParams,
    score_params: &ScoreParams,
) -> Result<(IkSolution, Matching, GatedScores, usize)> {
    let domain = params.domain(&model.nominal_lengths());
    let mut work = model.clone();
    let mut last: Option<(IkSolution, Matching, GatedScores, usize)> = None;
    for _ in 0..params.direct_ik_rounds.max(1) {
        let visible = visible_reference_points(&work, camera, &params.visibility);
        let (matching, scores) = match_frame(&work, &visible, &frame.points, score_params)?;
        if last.as_ref().is_some_and(|(_, previous, _, _)| previous.pairs == matching.pairs) {
            // Correspondences repeat, so further rounds would only refine offsets.
            break;
        }
        let estimate = work.current_config.clone();
        let sol = fit_all_pairs(&work, &matching, frame, &estimate, &domain, &params.ik)?;
        let moved = (tip_position(&sol.config) - tip_position(&estimate)).norm();
        work.set_current_config(sol.config.clone())?;
        last = Some((sol, matching, scores, visible.len()));
        if moved < params.direct_ik_tolerance {
            break;
        }
    }
    Ok(last.expect("at least one round"))
}

/// Matched pairs per partition.
fn pair_counts(model: &ReferenceModel, matching: &Matching) -> Vec<usize> {
    let mut counts = vec![0usize; model.n_partitions()];
    for p in &matching.pairs {
        counts[model.points[p.reference].partition] += 1;
    }
    counts
}

/// Processes one frame and updates the reference model in place.
///
/// Visibility, scoring, assignment, per-partition registration, backbone
/// fit, surface point update, descriptor update. When fewer than two
/// partitions can be registered the frame is flagged as a tracking loss and
/// the model is left untouched.
pub fn process_frame(
    model: &mut ReferenceModel,
    frame: &ObservedFrame,
    camera: &CameraModel,
    params: &PipelineParams,
) -> Result<FrameResult> {
    Ok(process_frame_detailed(model, frame, camera, params)?.result)
}

/// Frame result together with the assignment and the gated score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetail {
    pub result: FrameResult,
    pub matching: Matching,
    pub scores: GatedScores,
}

/// [`process_frame`] that also returns the matching and scores it used.
pub fn process_frame_detailed(
    model: &mut ReferenceModel,
    frame: &ObservedFrame,
    camera: &CameraModel,
    params: &PipelineParams,
) -> Result<FrameDetail> {
    params.validate()?;
    let start = Instant::now();
    let mut timings = Timings::default();
    let k = model.n_partitions();
    let lost = |model: &ReferenceModel, timings: Timings, n_visible, pair_counts, mean_score| FrameResult {
        config: model.current_config.clone(),
        transforms: vec![None; k],
        pair_counts,
        n_visible,
        n_observed: frame.points.len(),
        mean_score,
        residual: 0.0,
        tip: tip_position(&model.current_config),
        ik_iterations: 0,
        ik_converged: false,
        tracking_lost: true,
        timings,
    };

    let score_params = ScoreParams { geometry_only: params.ablation.geometry_only || params.score.geometry_only, ..params.score };
    let domain = params.domain(&model.nominal_lengths());

    let (solution, transforms, matching, scores, n_visible) = if params.ablation.direct_ik {
        // Correspondence search is part of every round, so it is timed with the fit.
        let t = Instant::now();
        match direct_backbone_fit(model, frame, camera, params, &score_params) {
            Ok((sol, matching, scores, n_visible)) => {
                timings.backbone = t.elapsed().as_secs_f64();
                (sol, vec![None; k], matching, scores, n_visible)
            }
            Err(Error::TrackingLoss(_)) => {
                let visible = visible_reference_points(model, camera, &params.visibility);
                let (matching, scores) = match_frame(model, &visible, &frame.points, &score_params)?;
                timings.total = start.elapsed().as_secs_f64();
                let counts = pair_counts(model, &matching);
                let result = lost(model, timings, visible.len(), counts, matching.mean_score());
                return Ok(FrameDetail { result, matching, scores });
            }
            Err(e) => return Err(e),
        }
    } else {
        let t = Instant::now();
        let visible = visible_reference_points(model, camera, &params.visibility);
        timings.visibility = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (matching, scores) = match_frame(model, &visible, &frame.points, &score_params)?;
        timings.scoring = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut src: Vec<Vec<Vec3>> = vec![Vec::new(); k];
        let mut dst: Vec<Vec<Vec3>> = vec![Vec::new(); k];
        for p in &matching.pairs {
            let point = &model.points[p.reference];
            src[point.partition].push(point.current_position);
            dst[point.partition].push(frame.points[p.observed].position);
        }
        let mut transforms = vec![None; k];
        let mut resolved = Vec::new();
        for j in 0..k {
            if src[j].len() < params.min_pairs {
                continue;
            }
            match estimate_partition_transform(&src[j], &dst[j]) {
                Ok(reg) => {
                    transforms[j] = Some(reg.transform);
                    resolved.push((j, reg.transform));
                }
                Err(Error::DegenerateGeometry(_) | Error::InsufficientData { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        timings.registration = t.elapsed().as_secs_f64();

        let t = Instant::now();
        match global_backbone_fit(model, &resolved, &domain, &params.ik) {
            Ok(sol) => {
                timings.backbone = t.elapsed().as_secs_f64();
                (sol, transforms, matching, scores, visible.len())
            }
            Err(Error::TrackingLoss(_)) => {
                timings.total = start.elapsed().as_secs_f64();
                let counts = pair_counts(model, &matching);
                let result = lost(model, timings, visible.len(), counts, matching.mean_score());
                return Ok(FrameDetail { result, matching, scores });
            }
            Err(e) => return Err(e),
        }
    };
    let counts = pair_counts(model, &matching);

    let t = Instant::now();
    model.set_current_config(solution.config.clone())?;
    if !params.ablation.no_descriptor_update {
        update_descriptors(model, &matching, &frame.points, params.alpha, params.dt, params.renormalize)?;
    }
    timings.update = t.elapsed().as_secs_f64();
    timings.total = start.elapsed().as_secs_f64();

    let result = FrameResult {
        tip: tip_position(&solution.config),
        config: solution.config,
        transforms,
        pair_counts: counts,
        n_visible,
        n_observed: frame.points.len(),
        mean_score: matching.mean_score(),
        residual: solution.residual,
        ik_iterations: solution.iterations,
        ik_converged: solution.converged,
        tracking_lost: false,
        timings,
    };
    Ok(FrameDetail { result, matching, scores })
}

/// Errors normalized by the ground-truth robot length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tip_error: f64,
    pub shape_error: f64,
}

/// Relative tip error and mean relative backbone error over `n_points`
/// cross-sections at `sigma_k = k L / n` (k = 1..n).
///
/// Cross-sections are identified by material coordinate on the ground-truth
/// segment lengths, so estimates with different lengths compare the same
/// material points.
pub fn compute_metrics(estimate: &RobotConfig, truth: &RobotConfig, n_points: usize) -> Result<Metrics> {
    let lengths = truth.lengths();
    let total = truth.total_length();
    let tip_error = (tip_position(estimate) - tip_position(truth)).norm() / total;
    let n = n_points.max(1);
    let mut sum = 0.0;
    for k in 1..=n {
        let sigma = total * k as f64 / n as f64;
        let a = material_pose(estimate, &lengths, sigma)?.position;
        let b = forward_kinematics(truth, sigma)?.position;
        sum += (a - b).norm();
    }
    Ok(Metrics { tip_error, shape_error: sum / n as f64 / total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::SegmentConfig;
    use std::f64::consts::PI;

    #[test]
    fn metrics_exact_and_quarter_arc() {
        let truth = RobotConfig::new(vec![SegmentConfig::new(PI / 0.8, 0.0, 0.2), SegmentConfig::new(PI / 0.8, 0.0, 0.2)]);
        let m = compute_metrics(&truth, &truth, 8).unwrap();
        assert_eq!(m.tip_error, 0.0);
        assert_eq!(m.shape_error, 0.0);

        let straight = RobotConfig::straight(&[0.2, 0.2]);
        let m = compute_metrics(&straight, &truth, 8).unwrap();
        // Quarter circle of radius r = 2L/pi ends at (r, 0, r).
        let r = 0.8 / PI;
        let expected = (Vec3::new(r, 0.0, r) - Vec3::new(0.0, 0.0, 0.4)).norm() / 0.4;
        assert!((m.tip_error - expected).abs() < 1e-12);
        assert!(m.shape_error > 0.0 && m.shape_error < m.tip_error);
    }

    #[test]
    fn backbone_fit_needs_two_partitions() {
        let rest = RobotConfig::straight(&[0.2, 0.2]);
        let model = ReferenceModel {
            points: vec![],
            current_config: rest.clone(),
            rest_config: rest,
            partitions: crate::refmodel::Partitioning::uniform(0.4, 4).unwrap(),
        };
        let domain = PipelineParams::default().domain(&[0.2, 0.2]);
        let one = [(0, RigidTransform::identity())];
        assert!(matches!(
            global_backbone_fit(&model, &one, &domain, &IkOptions::default()),
            Err(Error::TrackingLoss(_))
        ));
        let all: Vec<_> = (0..4).map(|j| (j, RigidTransform::identity())).collect();
        let sol = global_backbone_fit(&model, &all, &domain, &IkOptions::default()).unwrap();
        assert!(sol.residual < 1e-10);
        assert_eq!(sol.config, model.rest_config);
    }
}
