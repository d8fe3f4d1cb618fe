//! Synthetic RGB-D ground truth.
//!
//! Stands in for the vision front end: a textured cylinder on a PCC
//! backbone, multi-view reference descriptors, a point renderer with
//! self-occlusion, digital occlusion bars, sensor noise, a pressure driven
//! plant and trajectory generators.

mod io;
mod render;
mod trajectory;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kinematics::RobotConfig;
use crate::refmodel::Descriptor;
use crate::Vec3;

pub use io::{read_frame, write_frame, FRAME_FORMAT_VERSION};
pub use render::{render_frame, ObservedFrame, OcclusionBar, NoiseSpec, BAR_HEIGHT_FRACTION};
pub use trajectory::{
    make_trajectory, random_pressure_sets, viewpoint_camera, PressurePlant, TrajectoryKind,
    VIEWPOINTS, CHAMBER_ANGLES,
};

/// Synthetic appearance texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureSpec {
    /// Dimension of every descriptor scale.
    pub dims: Vec<usize>,
    /// Correlation length of the smooth texture component per scale, m.
    pub length_scales: Vec<f64>,
    /// Random Fourier terms per smooth component.
    pub n_waves: usize,
    /// Weights of the smooth and the point-unique components on the body.
    pub smooth_weight: f64,
    pub unique_weight: f64,
    /// Weights of the shared tip cluster centre and the point-unique part on the tip.
    pub tip_cluster_weight: f64,
    pub tip_unique_weight: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            dims: vec![64, 256, 1024],
            length_scales: vec![0.01, 0.04, 0.12],
            n_waves: 16,
            smooth_weight: 0.6,
            unique_weight: 0.8,
            tip_cluster_weight: 0.5,
            tip_unique_weight: 0.866,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotGeometry {
    /// Total backbone length, m.
    pub length: f64,
    pub radius: f64,
    pub n_segments: usize,
    pub points_per_ring: usize,
    pub rings_per_meter: f64,
    /// Fraction of the length, measured from the tip, carrying the tip texture.
    pub tip_fraction: f64,
    pub texture: TextureSpec,
}

impl Default for RobotGeometry {
    fn default() -> Self {
        Self {
            length: 0.4,
            radius: 0.02,
            n_segments: 2,
            points_per_ring: 24,
            rings_per_meter: 250.0,
            tip_fraction: 0.125,
            texture: TextureSpec::default(),
        }
    }
}

impl RobotGeometry {
    pub fn validate(&self) -> Result<()> {
        let t = &self.texture;
        if !(self.length > 0.0 && self.radius > 0.0 && self.rings_per_meter > 0.0) {
            return Err(invalid("geometry needs positive length, radius and ring density"));
        }
        if self.n_segments == 0 || self.points_per_ring == 0 || self.n_rings() == 0 {
            return Err(invalid("geometry needs at least one segment, ring and point per ring"));
        }
        if !(0.0..=1.0).contains(&self.tip_fraction) {
            return Err(invalid("tip fraction must lie in [0, 1]"));
        }
        if t.dims.is_empty() || t.dims.contains(&0) || t.length_scales.len() != t.dims.len() {
            return Err(invalid("texture needs one positive dimension and length scale per scale"));
        }
        if t.length_scales.iter().any(|l| !(*l > 0.0)) {
            return Err(invalid("texture length scales must be positive"));
        }
        Ok(())
    }

    pub fn n_rings(&self) -> usize {
        (self.length * self.rings_per_meter).round() as usize
    }

    /// Straight rest configuration with equal segment lengths.
    pub fn rest_config(&self) -> RobotConfig {
        RobotConfig::straight(&vec![self.length / self.n_segments as f64; self.n_segments])
    }
}

/// Undeformed surface cloud with its true appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub points: Vec<Vec3>,
    /// Outward unit normals at rest.
    pub normals: Vec<Vec3>,
    /// Structural coordinate (height on the straight rest backbone).
    pub sigmas: Vec<f64>,
    pub descriptors: Vec<Descriptor>,
    pub rest_config: RobotConfig,
}

/// Seed derived from a base seed and two stream indices (SplitMix64 finalizer).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(v)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Narrows to `f32`-representable values so files and memory agree bit for bit.
pub(crate) fn quantize(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Smooth vector-valued random field over 3D positions (random Fourier features).
struct SmoothField {
    freqs: Vec<Vec3>,
    phases: Vec<f64>,
    /// `dim x n_waves` amplitudes, row-major.
    amps: Vec<f64>,
    dim: usize,
}

impl SmoothField {
    fn new(rng: &mut impl Rng, dim: usize, length_scale: f64, n_waves: usize) -> Self {
        let freqs = (0..n_waves)
            .map(|_| {
                let g: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
                Vec3::from(g) / length_scale
            })
            .collect();
        let phases = (0..n_waves).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let amps = (0..dim * n_waves).map(|_| StandardNormal.sample(rng)).collect();
        Self { freqs, phases, amps, dim }
    }

    fn eval(&self, p: &Vec3) -> Vec<f64> {
        let n = self.freqs.len();
        let waves: Vec<f64> = self.freqs.iter().zip(&self.phases).map(|(w, b)| (w.dot(p) + b).cos()).collect();
        (0..self.dim)
            .map(|d| self.amps[d * n..(d + 1) * n].iter().zip(&waves).map(|(a, c)| a * c).sum())
            .collect()
    }
}

/// Rings of points on a cylinder around the straight rest backbone, each with
/// a seeded multi-scale descriptor.
///
/// Body descriptors mix a spatially smooth texture with a point-unique part;
/// tip descriptors cluster around a shared centre, which makes the tip stand
/// out from the body.
pub fn generate_surface(geometry: &RobotGeometry, seed: u64) -> Result<Surface> {
    geometry.validate()?;
    let tex = &geometry.texture;
    let n_rings = geometry.n_rings();
    let spacing = geometry.length / n_rings as f64;
    let mut points = Vec::with_capacity(n_rings * geometry.points_per_ring);
    let mut normals = Vec::with_capacity(points.capacity());
    let mut sigmas = Vec::with_capacity(points.capacity());
    for k in 0..n_rings {
        let z = (k as f64 + 0.5) * spacing;
        // Alternate rings are rotated by half a step.
        let offset = if k % 2 == 0 { 0.0 } else { 0.5 };
        for m in 0..geometry.points_per_ring {
            let a = 2.0 * PI * (m as f64 + offset) / geometry.points_per_ring as f64;
            let n = Vec3::new(a.cos(), a.sin(), 0.0);
            points.push(Vec3::new(0.0, 0.0, z) + geometry.radius * n);
            normals.push(n);
            sigmas.push(z);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7E47, 0));
    let fields: Vec<SmoothField> = tex
        .dims
        .iter()
        .zip(&tex.length_scales)
        .map(|(&d, &l)| SmoothField::new(&mut rng, d, l, tex.n_waves))
        .collect();
    let tip_centres: Vec<Vec<f64>> = tex.dims.iter().map(|&d| gaussian_unit(&mut rng, d)).collect();
    let tip_start = geometry.length * (1.0 - geometry.tip_fraction);

    let descriptors = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut prng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD35C, i as u64));
            let scales = tex
                .dims
                .iter()
                .enumerate()
                .map(|(s, &d)| {
                    let unique = gaussian_unit(&mut prng, d);
                    let (base, wb, wu) = if p.z >= tip_start {
                        (tip_centres[s].clone(), tex.tip_cluster_weight, tex.tip_unique_weight)
                    } else {
                        (normalize(fields[s].eval(p)), tex.smooth_weight, tex.unique_weight)
                    };
                    let mixed = base.iter().zip(&unique).map(|(b, u)| wb * b + wu * u).collect();
                    quantize(normalize(mixed))
                })
                .collect();
            Descriptor::new(scales)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Surface { points, normals, sigmas, descriptors, rest_config: geometry.rest_config() })
}

/// Per-component Gaussian perturbation followed by per-scale renormalization.
pub(crate) fn perturb_descriptor(d: &Descriptor, std: f64, rng: &mut impl Rng) -> Descriptor {
    if std == 0.0 {
        return d.clone();
    }
    let scales = d
        .scales()
        .iter()
        .map(|v| {
            let noisy = v.iter().map(|x| x + std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
            quantize(normalize(noisy))
        })
        .collect();
    Descriptor::new(scales).unwrap_or_else(|_| d.clone())
}

/// Descriptors of every surface point as seen from `n_views` cameras spaced
/// evenly in azimuth around the rest shape.
///
/// A point is seen by a view when its outward normal faces that camera; each
/// sighting carries independent appearance noise of `view_noise`.
pub fn reference_views(surface: &Surface, n_views: usize, view_noise: f64, seed: u64) -> Result<Vec<Vec<Descriptor>>> {
    if n_views == 0 {
        return Err(invalid("need at least one reference view"));
    }
    if !(view_noise >= 0.0) {
        return Err(invalid("view noise must be non-negative"));
    }
    let directions: Vec<Vec3> = (0..n_views)
        .map(|v| {
            let a = 2.0 * PI * v as f64 / n_views as f64;
            Vec3::new(a.cos(), a.sin(), 0.0)
        })
        .collect();
    Ok(surface
        .normals
        .iter()
        .zip(&surface.descriptors)
        .enumerate()
        .map(|(i, (n, d))| {
            let mut views = Vec::new();
            for (v, dir) in directions.iter().enumerate() {
                if n.dot(dir) > 0.2 {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x71E3 + v as u64, i as u64));
                    views.push(perturb_descriptor(d, view_noise, &mut rng));
                }
            }
            if views.is_empty() {
                views.push(d.clone());
            }
            views
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cylinder_construction() {
        let g = RobotGeometry { points_per_ring: 16, rings_per_meter: 250.0, ..Default::default() };
        let s = generate_surface(&g, 1).unwrap();
        assert_eq!(s.points.len(), 1600);
        for p in &s.points {
            assert!((p.x.hypot(p.y) - 0.02).abs() < 1e-12);
            assert!(p.z > 0.0 && p.z < 0.4);
        }
        assert_eq!(s.descriptors[0].dims(), vec![64, 256, 1024]);
    }

    #[test]
    fn seeding() {
        let g = RobotGeometry { rings_per_meter: 50.0, ..Default::default() };
        let a = generate_surface(&g, 3).unwrap();
        let b = generate_surface(&g, 3).unwrap();
        let c = generate_surface(&g, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.descriptors, c.descriptors);
    }

    #[test]
    fn texture_is_distinctive() {
        let g = RobotGeometry::default();
        let s = generate_surface(&g, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let i = 500;
        let noisy = perturb_descriptor(&s.descriptors[i], 0.05, &mut rng);
        let same = noisy.multiscale_cosine(&s.descriptors[i]).unwrap();
        let neighbour = noisy.multiscale_cosine(&s.descriptors[i + 1]).unwrap();
        let far = noisy.multiscale_cosine(&s.descriptors[i + 800]).unwrap();
        assert!(same > 0.6, "self similarity {same}");
        assert!(neighbour < same - 0.2, "neighbour {neighbour} vs self {same}");
        assert!(far.abs() < 0.2, "far {far}");
    }

    #[test]
    fn views_cover_every_point() {
        let g = RobotGeometry { rings_per_meter: 50.0, ..Default::default() };
        let s = generate_surface(&g, 2).unwrap();
        let views = reference_views(&s, 8, 0.05, 2).unwrap();
        assert_eq!(views.len(), s.points.len());
        assert!(views.iter().all(|v| (2..=4).contains(&v.len())));
    }
}
