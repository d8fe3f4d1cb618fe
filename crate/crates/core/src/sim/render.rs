//! Point rendering of the deformed surface into an observed frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, perturb_descriptor, Surface};
use crate::camera::{zbuffer_visible, CameraModel, Projection, VisibilityParams};
use crate::error::{invalid, Result};
use crate::kinematics::{carry_offset, forward_kinematics, material_pose, RobotConfig};
use crate::matching::ObservedPoint;
use crate::Vec3;

/// Bar thickness as a fraction of the image height.
pub const BAR_HEIGHT_FRACTION: f64 = 0.06;

/// Horizontal block removing colour and depth, centred on the image columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OcclusionBar {
    /// Vertical centre as a fraction of the image height; 0 disables the bar.
    pub position: f64,
    /// Horizontal extent as a fraction of the image width; 0 disables the bar.
    pub width: f64,
}

impl OcclusionBar {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.position) && (0.0..=1.0).contains(&self.width) {
            Ok(())
        } else {
            Err(invalid(format!("occlusion bar {self:?} outside [0, 1]")))
        }
    }

    /// Whether the pixel with integer coordinates `(col, row)` lies under the bar.
    pub fn covers_pixel(&self, col: usize, row: usize, width: usize, height: usize) -> bool {
        if self.position == 0.0 || self.width == 0.0 {
            return false;
        }
        let (w, h) = (width as f64, height as f64);
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        let half_bar = 0.5 * BAR_HEIGHT_FRACTION * h;
        let centre = self.position * h;
        let half_width = 0.5 * self.width * w;
        (y - centre).abs() <= half_bar && (x - 0.5 * w).abs() <= half_width
    }

    pub fn covers(&self, p: &Projection, camera: &CameraModel) -> bool {
        self.covers_pixel(p.u as usize, p.v as usize, camera.width, camera.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Std of the depth error along the viewing ray, m.
    pub depth_std: f64,
    /// Std of the per-component descriptor perturbation.
    pub descriptor_std: f64,
    /// Probability of losing a visible point.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { depth_std: 0.001, descriptor_std: 0.05, dropout: 0.1, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self { depth_std: 0.0, descriptor_std: 0.0, dropout: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_std >= 0.0 && self.descriptor_std >= 0.0 && (0.0..1.0).contains(&self.dropout) {
            Ok(())
        } else {
            Err(invalid(format!("invalid noise spec {self:?}")))
        }
    }
}

/// Masked, back-projected surface points of one RGB-D frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedFrame {
    /// Seconds.
    pub timestamp: f64,
    pub points: Vec<ObservedPoint>,
    /// Ground-truth configuration (simulation only).
    pub truth: Option<RobotConfig>,
}

/// Renders the surface deformed to `config` as seen by `camera`.
///
/// The surface is deformed by surface point kinematics, self-occlusion is
/// resolved with a splatted z-buffer, points under the occlusion bar are
/// removed, and finally dropout, depth noise along the ray and descriptor
/// noise are applied. Noise is drawn per surface point from a stream keyed by
/// `(noise.seed, frame_index, point)`, so the same point receives the same
/// perturbation no matter which other points survive.
#[allow(clippy::too_many_arguments)]
pub fn render_frame(
    surface: &Surface,
    config: &RobotConfig,
    camera: &CameraModel,
    occlusion: &OcclusionBar,
    noise: &NoiseSpec,
    frame_index: u64,
    timestamp: f64,
) -> Result<ObservedFrame> {
    occlusion.validate()?;
    noise.validate()?;
    let nominal = surface.rest_config.lengths();
    let deformed: Vec<Vec3> = surface
        .points
        .iter()
        .zip(&surface.sigmas)
        .map(|(p, &s)| {
            let rest = forward_kinematics(&surface.rest_config, s)?;
            let current = material_pose(config, &nominal, s)?;
            Ok(carry_offset(&rest, &current, p))
        })
        .collect::<Result<_>>()?;

    let visible = zbuffer_visible(camera, &deformed, &VisibilityParams::default());
    let mut points = Vec::with_capacity(visible.len());
    for (i, proj) in visible {
        if occlusion.covers(&proj, camera) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(noise.seed, frame_index.wrapping_add(1), i as u64));
        let keep: f64 = rng.random();
        if keep < noise.dropout {
            continue;
        }
        let position = if noise.depth_std > 0.0 {
            let dz: f64 = StandardNormal.sample(&mut rng);
            camera.back_project(proj.u, proj.v, proj.depth + noise.depth_std * dz)
        } else {
            deformed[i]
        };
        let descriptor = perturb_descriptor(&surface.descriptors[i], noise.descriptor_std, &mut rng);
        points.push(ObservedPoint { position, pixel: [proj.u, proj.v], descriptor });
    }
    Ok(ObservedFrame { timestamp, points, truth: Some(config.clone()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_surface, viewpoint_camera, RobotGeometry};

    #[test]
    fn bar_pixel_rule() {
        let bar = OcclusionBar { position: 0.5, width: 0.25 };
        // 192 rows: centre 96, half thickness 5.76.
        assert!(bar.covers_pixel(128, 96, 256, 192));
        assert!(bar.covers_pixel(128, 90, 256, 192));
        assert!(!bar.covers_pixel(128, 89, 256, 192));
        assert!(bar.covers_pixel(96, 96, 256, 192));
        assert!(!bar.covers_pixel(95, 96, 256, 192));
        assert!(!OcclusionBar { position: 0.0, width: 1.0 }.covers_pixel(128, 0, 256, 192));
        assert!(!OcclusionBar { position: 0.5, width: 0.0 }.covers_pixel(128, 96, 256, 192));
    }

    #[test]
    fn clean_render_is_exact_and_depth_consistent() {
        let g = RobotGeometry::default();
        let surface = generate_surface(&g, 1).unwrap();
        let cam = viewpoint_camera("front", 0.7, g.length).unwrap();
        let config = RobotConfig::new(vec![
            crate::kinematics::SegmentConfig::new(3.0, 0.5, 0.2),
            crate::kinematics::SegmentConfig::new(2.0, -2.0, 0.21),
        ]);
        let frame = render_frame(&surface, &config, &cam, &OcclusionBar::none(), &NoiseSpec::zero(), 0, 0.0).unwrap();
        let n = frame.points.len();
        assert!(n > 800 && n < 1400, "{n} visible points");
        for q in &frame.points {
            let p = cam.project(&q.position).unwrap();
            assert!((p.u - q.pixel[0]).abs() < 1e-9 && (p.v - q.pixel[1]).abs() < 1e-9);
        }
    }
}
