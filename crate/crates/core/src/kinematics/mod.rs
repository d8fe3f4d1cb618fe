//! Piecewise-constant-curvature (PCC) kinematics.
//!
//! Every segment is a circular arc described by its curvature `kappa`,
//! bending direction `phi` and arc length. Inside a segment the frame at
//! arc length `s` is
//!
//! ```text
//! R(s) = Rz(phi) * Ry(kappa * s) * Rz(-phi)
//! t(s) = [ (1 - cos(kappa s)) / kappa * cos(phi),
//!          (1 - cos(kappa s)) / kappa * sin(phi),
//!          sin(kappa s) / kappa ]
//! ```
//!
//! and segments compose base to tip. Both expressions are evaluated
//! through `sinc`, so the straight limit `kappa -> 0` needs no branch.
//!
//! Structural coordinates (`sigma`) are *material* arc lengths measured on
//! a nominal (rest) layout of segment lengths. When a segment stretches,
//! a coordinate keeps its fraction of that segment, so it stays attached
//! to the same cross-section.

mod ik;
mod pressure;

pub use ik::{inverse_kinematics, FeasibleDomain, IkOptions, IkSolution, IkTarget};
pub use pressure::{
    fit_pressure_model, pressures_to_lengths, LengthPrediction, PressureModel, PressureSample,
    SegmentPressureModel, CHAMBERS_PER_SEGMENT, MAX_PRESSURE_KPA,
};

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Below this `|kappa * s|` the arc functions switch to their series.
const SERIES_THRESHOLD: f64 = 1e-6;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// `sin(x) / x`, exact at the origin.
fn sinc(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Configuration `(kappa, phi, length)` of one constant-curvature segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    /// Curvature in 1/m.
    pub kappa: f64,
    /// Bending direction in rad, measured from the base x-axis.
    pub phi: f64,
    /// Arc length in m.
    pub length: f64,
}

impl SegmentConfig {
    pub fn new(kappa: f64, phi: f64, length: f64) -> Self {
        Self { kappa, phi, length }
    }

    pub fn straight(length: f64) -> Self {
        Self::new(0.0, 0.0, length)
    }

    /// Builds a segment from its curvature vector `kappa * (cos phi, sin phi)`.
    pub fn from_curvature_vector(kx: f64, ky: f64, length: f64) -> Self {
        Self::new(kx.hypot(ky), ky.atan2(kx), length)
    }

    pub fn curvature_vector(&self) -> (f64, f64) {
        let (s, c) = self.phi.sin_cos();
        (self.kappa * c, self.kappa * s)
    }

    pub fn validate(&self, kappa_max: f64) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::Domain(format!(
                "segment length must be positive, got {}",
                self.length
            )));
        }
        if !(self.kappa >= 0.0 && self.kappa <= kappa_max) {
            return Err(Error::Domain(format!(
                "curvature {} outside [0, {kappa_max}]",
                self.kappa
            )));
        }
        if !(self.phi > -PI && self.phi <= PI) {
            return Err(Error::Domain(format!("bending direction {} not wrapped", self.phi)));
        }
        Ok(())
    }

    /// Frame at arc length `s` in this segment's base frame.
    pub fn local_pose(&self, s: f64) -> BackbonePose {
        let theta = self.kappa * s;
        let (sin_phi, cos_phi) = self.phi.sin_cos();
        // Rodrigues about the in-plane axis (-sin phi, cos phi, 0).
        let axis = Vector3::new(-sin_phi, cos_phi, 0.0);
        let k = axis.cross_matrix();
        let rotation = Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos());

        let half = sinc(0.5 * theta);
        let radial = s * 0.5 * theta * half * half;
        let position = Vector3::new(radial * cos_phi, radial * sin_phi, s * sinc(theta));
        BackbonePose {
            position,
            rotation: Rotation3::from_matrix_unchecked(rotation),
        }
    }
}

/// Ordered list of segments, base first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub segments: Vec<SegmentConfig>,
}

impl RobotConfig {
    pub fn new(segments: Vec<SegmentConfig>) -> Self {
        Self { segments }
    }

    /// Straight robot with the given segment lengths.
    pub fn straight(lengths: &[f64]) -> Self {
        Self::new(lengths.iter().map(|&l| SegmentConfig::straight(l)).collect())
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.length).collect()
    }

    pub fn validate(&self, kappa_max: f64) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Domain("robot needs at least one segment".into()));
        }
        self.segments.iter().try_for_each(|s| s.validate(kappa_max))
    }

    /// Same shape with every `phi` wrapped and straight segments canonicalized to `phi = 0`.
    pub fn canonical(&self) -> Self {
        Self::new(
            self.segments
                .iter()
                .map(|s| {
                    let phi = if s.kappa < 1e-6 { 0.0 } else { wrap_angle(s.phi) };
                    SegmentConfig::new(s.kappa, phi, s.length)
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Position and orientation of a backbone cross-section.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackbonePose {
    pub position: Vec3,
    pub rotation: Rotation3<f64>,
}

impl BackbonePose {
    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: Rotation3::identity(),
        }
    }

    /// `self * local`: express `local` (given in this frame) in the parent frame.
    pub fn compose(&self, local: &BackbonePose) -> BackbonePose {
        BackbonePose {
            position: self.position + self.rotation * local.position,
            rotation: self.rotation * local.rotation,
        }
    }
}

/// Pose of the backbone at arc length `arc` of the *current* configuration.
pub fn forward_kinematics(config: &RobotConfig, arc: f64) -> Result<BackbonePose> {
    let total = config.total_length();
    let slack = 1e-12 * total.max(1.0);
    if !(arc >= -slack && arc <= total + slack) {
        return Err(Error::Domain(format!("arc length {arc} outside [0, {total}]")));
    }
    let mut remaining = arc.clamp(0.0, total);
    let mut pose = BackbonePose::identity();
    let last = config.segments.len() - 1;
    for (i, seg) in config.segments.iter().enumerate() {
        if remaining <= seg.length || i == last {
            return Ok(pose.compose(&seg.local_pose(remaining.min(seg.length))));
        }
        pose = pose.compose(&seg.local_pose(seg.length));
        remaining -= seg.length;
    }
    unreachable!("robot config has at least one segment")
}

/// Maps a material coordinate on the `nominal` segment layout to the arc
/// length of the same cross-section in `config`.
pub fn material_to_arc(config: &RobotConfig, nominal: &[f64], sigma: f64) -> Result<f64> {
    if nominal.len() != config.segments.len() {
        return Err(Error::InvalidArgument(format!(
            "nominal layout has {} segments, config has {}",
            nominal.len(),
            config.segments.len()
        )));
    }
    let total: f64 = nominal.iter().sum();
    let slack = 1e-12 * total.max(1.0);
    if !(sigma >= -slack && sigma <= total + slack) {
        return Err(Error::Domain(format!(
            "structural coordinate {sigma} outside [0, {total}]"
        )));
    }
    let sigma = sigma.clamp(0.0, total);
    let mut start_nominal = 0.0;
    let mut start_current = 0.0;
    let last = nominal.len() - 1;
    for (i, (&l_nom, seg)) in nominal.iter().zip(&config.segments).enumerate() {
        if sigma <= start_nominal + l_nom || i == last {
            let fraction = ((sigma - start_nominal) / l_nom).clamp(0.0, 1.0);
            return Ok(start_current + fraction * seg.length);
        }
        start_nominal += l_nom;
        start_current += seg.length;
    }
    unreachable!()
}

/// Pose at material coordinate `sigma` (measured on `nominal` lengths).
pub fn material_pose(config: &RobotConfig, nominal: &[f64], sigma: f64) -> Result<BackbonePose> {
    forward_kinematics(config, material_to_arc(config, nominal, sigma)?)
}

/// Tip position of a configuration.
pub fn tip_position(config: &RobotConfig) -> Vec3 {
    forward_kinematics(config, config.total_length())
        .expect("total length is always in range")
        .position
}

/// Surface point kinematics: carries a rest-state surface point to `config`.
///
/// `p = t(xi, sigma) + R(xi, sigma) R(xi0, sigma)^T (p0 - t(xi0, sigma))`.
/// For a straight rest shape `R(xi0, sigma)` is the identity and this is
/// the textbook form; the relative rotation keeps `config == rest_config`
/// an identity map for curved rest shapes too. `sigma` is a material
/// coordinate on the rest layout.
pub fn surface_point_position(
    config: &RobotConfig,
    rest_config: &RobotConfig,
    rest_point: &Vec3,
    sigma: f64,
) -> Result<Vec3> {
    let nominal = rest_config.lengths();
    let rest = forward_kinematics(rest_config, sigma)?;
    let current = material_pose(config, &nominal, sigma)?;
    Ok(carry_offset(&rest, &current, rest_point))
}

/// Moves `rest_point`, attached to the `rest` frame, along with that frame to `current`.
pub(crate) fn carry_offset(rest: &BackbonePose, current: &BackbonePose, rest_point: &Vec3) -> Vec3 {
    let offset = rest.rotation.inverse() * (rest_point - rest.position);
    current.position + current.rotation * offset
}
