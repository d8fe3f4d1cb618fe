//! Closed-loop shape and tip control driven by the reconstruction.
//!
//! Per segment a PI law on curvature sets the pressure magnitude, and a
//! rectified cosine over the chamber angles spreads it over at most two
//! chambers. Because that weighting does not bend the plant exactly toward
//! the commanded angle, the commanded direction carries an integral
//! correction on the bending-direction error.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{invalid, Result};
use crate::kinematics::{
    forward_kinematics, inverse_kinematics, material_pose, tip_position, wrap_angle, FeasibleDomain, IkOptions,
    IkTarget, RobotConfig, SegmentConfig, CHAMBERS_PER_SEGMENT, MAX_PRESSURE_KPA,
};
use crate::reconstruct::{process_frame, PipelineParams};
use crate::refmodel::ReferenceModel;
use crate::sim::{render_frame, NoiseSpec, OcclusionBar, PressurePlant, Surface, CHAMBER_ANGLES};
use crate::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControlTarget {
    /// Curvature (1/m) and bending direction (rad) per segment.
    Shape { kappa: Vec<f64>, phi: Vec<f64> },
    /// Tip position, m.
    Tip { position: Vec3 },
}

impl ControlTarget {
    pub fn validate(&self, n_segments: usize) -> Result<()> {
        match self {
            ControlTarget::Shape { kappa, phi } => {
                if kappa.len() != n_segments || phi.len() != n_segments {
                    return Err(invalid(format!("shape target needs {n_segments} (kappa, phi) pairs")));
                }
                if kappa.iter().chain(phi).any(|x| !x.is_finite()) || kappa.iter().any(|&k| k < 0.0) {
                    return Err(invalid("shape target needs finite values and kappa >= 0"));
                }
            }
            ControlTarget::Tip { position } => {
                if !position.iter().all(|x| x.is_finite()) {
                    return Err(invalid("tip target must be finite"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    /// kPa per 1/m of curvature error.
    pub kp: f64,
    /// kPa per (1/m s) of integrated curvature error.
    pub ki: f64,
    /// Direction correction rate, 1/s.
    pub k_phi: f64,
    /// Below this curvature (1/m) the bending direction is not corrected.
    pub phi_gate: f64,

    /// Largest pressure magnitude, kPa.
    pub u_max: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self { kp: 4.0, ki: 15.0, k_phi: 0.6, phi_gate: 0.3, u_max: MAX_PRESSURE_KPA }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        let values = [self.kp, self.ki, self.k_phi, self.phi_gate, self.u_max];
        if values.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || self.u_max > MAX_PRESSURE_KPA {
            return Err(invalid("controller gains must be non-negative and u_max at most 100 kPa"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub gains: ControllerGains,
    /// Integrated curvature error per segment, s/m.
    pub integral: Vec<f64>,
    /// Correction added to the commanded bending direction per segment, rad.
    pub phi_offset: Vec<f64>,
    /// Last command, kPa, three chambers per segment.
    pub pressures: Vec<f64>,
    /// Whether each segment's magnitude hit a bound on the last step.
    pub saturated: Vec<bool>,
}

impl ControllerState {
    pub fn new(n_segments: usize, gains: ControllerGains) -> Self {
        Self {
            gains,
            integral: vec![0.0; n_segments],
            phi_offset: vec![0.0; n_segments],
            pressures: vec![0.0; CHAMBERS_PER_SEGMENT * n_segments],
            saturated: vec![false; n_segments],
        }
    }
}

/// Converts a target into a configuration.
///
/// Shape targets take the segment lengths of `start`. Tip targets go through
/// inverse kinematics from `start` with lengths free in `[0.9, 1.3]` times
/// `nominal`; only the bending parameters of the result are commanded. A
/// single tip position leaves several degrees of freedom open, so callers
/// keep `start` close to the previous resolution to stop the target from
/// wandering between steps.
pub fn resolve_target(
    target: &ControlTarget,
    start: &RobotConfig,
    nominal: &[f64],
    kappa_max: f64,
) -> Result<RobotConfig> {
    let n = start.segments.len();
    target.validate(n)?;
    match target {
        ControlTarget::Shape { kappa, phi } => Ok(RobotConfig::new(
            start.segments.iter().enumerate().map(|(i, s)| SegmentConfig::new(kappa[i], phi[i], s.length)).collect(),
        )),
        ControlTarget::Tip { position } => {
            let domain = FeasibleDomain { kappa_max, ..FeasibleDomain::around(nominal) };
            let target = IkTarget { sigma: nominal.iter().sum(), position: *position };
            Ok(inverse_kinematics(&[target], start, &domain, &IkOptions::default())?.config)
        }
    }
}

/// Single constant-curvature arc through `position` with the given segment lengths.
///
/// Used as the first guess when resolving a tip target: it spreads the bend
/// evenly instead of loading one segment.
pub fn tip_arc_guess(position: &Vec3, lengths: &[f64]) -> RobotConfig {
    let total: f64 = lengths.iter().sum();
    let horizontal = position.x.hypot(position.y);
    let phi = if horizontal > 0.0 { position.y.atan2(position.x) } else { 0.0 };
    // A planar arc of turning angle theta ends at tan(theta / 2) = horizontal / vertical.
    let kappa = 2.0 * horizontal.atan2(position.z) / total;
    RobotConfig::new(lengths.iter().map(|&l| SegmentConfig::new(kappa, phi, l)).collect())
}

/// One controller update from the current estimate toward `target`; `dt` in s.
pub fn control_step(
    state: &ControllerState,
    estimate: &RobotConfig,
    target: &RobotConfig,
    dt: f64,
) -> Result<(Vec<f64>, ControllerState)> {
    estimate.validate(f64::INFINITY)?;
    target.validate(f64::INFINITY)?;
    state.gains.validate()?;
    let n = estimate.segments.len();
    if target.segments.len() != n || state.integral.len() != n || state.pressures.len() != CHAMBERS_PER_SEGMENT * n {
        return Err(invalid("controller state, estimate and target disagree in segment count"));
    }
    if !(dt > 0.0) {
        return Err(invalid("control interval must be positive"));
    }
    let g = state.gains;
    let mut next = state.clone();
    for (i, (est, tgt)) in estimate.segments.iter().zip(&target.segments).enumerate() {
        let error = tgt.kappa - est.kappa;
        let raw = g.kp * error + g.ki * (state.integral[i] + error * dt);
        let u = raw.clamp(0.0, g.u_max);
        // Conditional integration: never wind further into a bound.
        let winding = (raw > g.u_max && error > 0.0) || (raw < 0.0 && error < 0.0);
        if !winding {
            next.integral[i] = state.integral[i] + error * dt;
        }
        next.saturated[i] = raw > g.u_max || (raw < 0.0 && tgt.kappa > 0.0);

        if est.kappa > g.phi_gate && tgt.kappa > g.phi_gate {
            next.phi_offset[i] = wrap_angle(state.phi_offset[i] + g.k_phi * dt * wrap_angle(tgt.phi - est.phi));
        }
        let psi = tgt.phi + next.phi_offset[i];
        next.pressures[CHAMBERS_PER_SEGMENT * i..CHAMBERS_PER_SEGMENT * (i + 1)]
            .copy_from_slice(&chamber_pressures(u, psi));
    }
    Ok((next.pressures.clone(), next))
}

/// Rectified cosine weighting of magnitude `u` (kPa) toward direction `psi` (rad).
pub fn chamber_pressures(u: f64, psi: f64) -> [f64; CHAMBERS_PER_SEGMENT] {
    CHAMBER_ANGLES.map(|theta| (u * (psi - theta).cos().max(0.0)).clamp(0.0, MAX_PRESSURE_KPA))
}

/// Ground-truth plant with a first-order pressure lag.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedPlant {
    pub plant: PressurePlant,
    /// Pressure time constant, s.
    pub time_constant: f64,
    pressures: Vec<f64>,
}

impl SimulatedPlant {
    /// Plant at rest.
    pub fn new(plant: PressurePlant, time_constant: f64) -> Result<Self> {
        if !(time_constant >= 0.0) {
            return Err(invalid("time constant must be non-negative"));
        }
        let pressures = vec![0.0; CHAMBERS_PER_SEGMENT * plant.n_segments()];
        Ok(Self { plant, time_constant, pressures })
    }

    pub fn pressures(&self) -> &[f64] {
        &self.pressures
    }

    pub fn config(&self) -> Result<RobotConfig> {
        self.plant.config(&self.pressures)
    }

    /// Advances the chamber pressures by `dt` toward `command`.
    pub fn apply(&mut self, command: &[f64], dt: f64) -> Result<()> {
        if command.len() != self.pressures.len() {
            return Err(invalid("pressure command has the wrong length"));
        }
        let a = dt / (self.time_constant + dt);
        for (p, c) in self.pressures.iter_mut().zip(command) {
            *p += a * (c.clamp(0.0, MAX_PRESSURE_KPA) - *p);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlParams {
    pub gains: ControllerGains,
    pub n_steps: usize,
    /// Curvature bound, 1/m, when resolving tip targets. A single tip
    /// position admits many configurations; this keeps the resolution
    /// inside what the actuators can reach in every bending direction.
    pub tip_kappa_max: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self { gains: ControllerGains::default(), n_steps: 50, tip_kappa_max: 3.0 }
    }
}

/// Everything the loop needs to sense the plant.
#[derive(Clone, Debug)]
pub struct Sensing<'a> {
    pub surface: &'a Surface,
    pub camera: &'a CameraModel,
    pub noise: NoiseSpec,
    pub occlusion: OcclusionBar,
    pub pipeline: PipelineParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Command issued after this step's estimate, kPa.
    pub pressures: Vec<f64>,
    pub estimate: RobotConfig,
    pub truth: RobotConfig,
    /// Configuration the controller aimed at this step.
    pub target: RobotConfig,
    /// Mean distance of 8 backbone points to the target shape, divided by L.
    pub shape_error: f64,
    /// Tip distance to the target tip, divided by L.
    pub tip_error: f64,
    pub tracking_lost: bool,
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub target: ControlTarget,
    pub steps: Vec<TraceStep>,
}

/// Number of final steps averaged for steady-state errors.
pub const STEADY_STATE_STEPS: usize = 5;

impl ClosedLoopTrace {
    /// Mean shape and tip errors over the last five steps.
    pub fn steady_state(&self) -> (f64, f64) {
        let tail = &self.steps[self.steps.len().saturating_sub(STEADY_STATE_STEPS)..];
        let n = tail.len().max(1) as f64;
        (
            tail.iter().map(|s| s.shape_error).sum::<f64>() / n,
            tail.iter().map(|s| s.tip_error).sum::<f64>() / n,
        )
    }

    /// CSV: step, pressures, estimated and true `(kappa, phi, l)` per segment, errors.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let Some(first) = self.steps.first() else { return Ok(()) };
        let n = first.truth.segments.len();
        let mut header = vec!["step".to_string()];
        header.extend((0..CHAMBERS_PER_SEGMENT * n).map(|c| format!("p{c}")));
        for prefix in ["est", "true"] {
            for i in 0..n {
                header.extend(["kappa", "phi", "l"].map(|q| format!("{prefix}_{q}{i}")));
            }
        }
        header.extend(["shape_error", "tip_error", "tracking_lost", "saturated"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string()];
            row.extend(s.pressures.iter().map(|p| p.to_string()));
            for c in [&s.estimate, &s.truth] {
                for seg in &c.segments {
                    row.extend([seg.kappa, seg.phi, seg.length].map(|x| x.to_string()));
                }
            }
            row.extend([s.shape_error.to_string(), s.tip_error.to_string()]);
            row.extend([s.tracking_lost, s.saturated].map(|b| u8::from(b).to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Mean distance over `n` backbone points at material coordinates `k L / n`
/// (measured on the lengths of `b`), divided by `length`.
fn backbone_error(a: &RobotConfig, b: &RobotConfig, n: usize, length: f64) -> Result<f64> {
    let lengths = b.lengths();
    let total = b.total_length();
    let mut sum = 0.0;
    for k in 1..=n {
        let sigma = total * k as f64 / n as f64;
        sum += (material_pose(a, &lengths, sigma)?.position - forward_kinematics(b, sigma)?.position).norm();
    }
    Ok(sum / n as f64 / length)
}

/// Sense, estimate, act for `n_steps`, starting with the plant at rest.
///
/// The reference model is expected in its rest state. On tracking loss the
/// previous command is held.
pub fn run_closed_loop(
    plant: &mut SimulatedPlant,
    model: &mut ReferenceModel,
    sensing: &Sensing,
    target: &ControlTarget,
    params: &ControlParams,
) -> Result<ClosedLoopTrace> {
    let n = plant.plant.n_segments();
    target.validate(n)?;
    params.gains.validate()?;
    if !(params.tip_kappa_max > 0.0) {
        return Err(invalid("tip curvature bound must be positive"));
    }
    let n_steps = params.n_steps;
    let dt = sensing.pipeline.dt;
    let length: f64 = plant.plant.nominal_lengths().iter().sum();
    let mut state = ControllerState::new(n, params.gains);
    let mut steps = Vec::with_capacity(n_steps);
    let nominal = model.nominal_lengths();
    let mut previous: Option<RobotConfig> = None;
    for step in 0..n_steps {
        let truth = plant.config()?;
        let frame = render_frame(
            sensing.surface,
            &truth,
            sensing.camera,
            &sensing.occlusion,
            &sensing.noise,
            step as u64,
            step as f64 * dt,
        )?;
        let result = process_frame(model, &frame, sensing.camera, &sensing.pipeline)?;
        let start = match (target, previous.take()) {
            (ControlTarget::Tip { .. }, Some(p)) => p,
            (ControlTarget::Tip { position }, None) => tip_arc_guess(position, &nominal),
            (ControlTarget::Shape { .. }, _) => result.config.clone(),
        };
        let desired = resolve_target(target, &start, &nominal, params.tip_kappa_max)?;
        previous = Some(desired.clone());
        if !result.tracking_lost {
            state = control_step(&state, &result.config, &desired, dt)?.1;
        }
        // The controller does not regulate length, so the shape is compared on the true lengths.
        let desired_true = RobotConfig::new(
            desired.segments.iter().zip(&truth.segments).map(|(d, t)| SegmentConfig::new(d.kappa, d.phi, t.length)).collect(),
        );
        let target_tip = match target {
            ControlTarget::Tip { position } => *position,
            ControlTarget::Shape { .. } => tip_position(&desired_true),
        };
        steps.push(TraceStep {
            step,
            pressures: state.pressures.clone(),
            estimate: result.config.clone(),
            shape_error: backbone_error(&truth, &desired_true, 8, length)?,
            tip_error: (tip_position(&truth) - target_tip).norm() / length,
            target: desired,
            truth,
            tracking_lost: result.tracking_lost,
            saturated: state.saturated.iter().any(|&s| s),
        });
        plant.apply(&state.pressures, dt)?;
    }
    Ok(ClosedLoopTrace { target: target.clone(), steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn straight() -> RobotConfig {
        RobotConfig::straight(&[0.2, 0.2])
    }

    #[test]
    fn angular_weighting_at_zero_phi() {
        let state = ControllerState::new(2, ControllerGains::default());
        let target = RobotConfig::new(vec![SegmentConfig::new(1.0, 0.0, 0.2), SegmentConfig::new(0.0, 0.0, 0.2)]);
        let (p, _) = control_step(&state, &straight(), &target, 0.4).unwrap();
        assert!(p[0] > 0.0);
        assert_eq!(&p[1..], &[0.0; 5]);
    }

    #[test]
    fn zero_error_holds_command() {
        let mut state = ControllerState::new(2, ControllerGains::default());
        state.integral = vec![1.0, 0.5];
        let c = RobotConfig::new(vec![SegmentConfig::new(1.0, 0.3, 0.2), SegmentConfig::new(2.0, -1.0, 0.2)]);
        let (p1, s1) = control_step(&state, &c, &c, 0.4).unwrap();
        let (p2, s2) = control_step(&s1, &c, &c, 0.4).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
        assert_eq!(s1.integral, state.integral);
        assert_abs_diff_eq!(p1[0], 15.0 * 1.0 * 0.3f64.cos(), epsilon = 1e-12);
    }

    #[test]
    fn saturation_is_flagged_and_clamped() {
        let state = ControllerState::new(2, ControllerGains { kp: 1000.0, ..Default::default() });
        let target = RobotConfig::new(vec![SegmentConfig::new(15.0, 0.0, 0.2), SegmentConfig::new(15.0, 1.0, 0.2)]);
        let (p, s) = control_step(&state, &straight(), &target, 0.4).unwrap();
        assert!(s.saturated.iter().all(|&x| x));
        assert!(p.iter().all(|x| (0.0..=100.0).contains(x)));
        assert_eq!(p[0], 100.0);
        // Saturated with positive error: no integration.
        assert_eq!(s.integral, vec![0.0, 0.0]);
    }

    #[test]
    fn at_most_two_chambers_active() {
        for k in 0..360 {
            let p = chamber_pressures(50.0, (k as f64).to_radians());
            assert!(p.iter().filter(|&&x| x > 0.0).count() <= 2);
        }
    }

    #[test]
    fn arc_guess_hits_single_arc_tips() {
        let arc = RobotConfig::new(vec![SegmentConfig::new(2.0, 0.7, 0.2), SegmentConfig::new(2.0, 0.7, 0.2)]);
        let guess = tip_arc_guess(&tip_position(&arc), &[0.2, 0.2]);
        assert!((tip_position(&guess) - tip_position(&arc)).norm() < 1e-12);
    }

    #[test]
    fn plant_lag_is_first_order() {
        let mut plant = SimulatedPlant::new(PressurePlant::default(), 1.0).unwrap();
        let cmd = [100.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        plant.apply(&cmd, 1.0).unwrap();
        assert_abs_diff_eq!(plant.pressures()[0], 50.0, epsilon = 1e-12);
        plant.apply(&cmd, 1.0).unwrap();
        assert_abs_diff_eq!(plant.pressures()[0], 75.0, epsilon = 1e-12);
    }

    #[test]
    fn tip_target_resolves_through_ik() {
        let truth = RobotConfig::new(vec![SegmentConfig::new(1.5, 0.4, 0.2), SegmentConfig::new(2.0, 0.9, 0.2)]);
        let target = ControlTarget::Tip { position: tip_position(&truth) };
        let config = resolve_target(&target, &straight(), &[0.2, 0.2], 20.0).unwrap();
        assert!((tip_position(&config) - tip_position(&truth)).norm() < 1e-6);
    }
}
