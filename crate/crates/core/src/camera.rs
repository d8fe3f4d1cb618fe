//! Pinhole camera and point-based z-buffering.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Pinhole camera with a world-to-camera extrinsic.
///
/// Camera frame: x right, y down, z forward (optical axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Rotation3<f64>,
    /// World-to-camera translation: `x_cam = R x_world + t`.
    pub translation: Vec3,
}

/// A world point seen through the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Continuous pixel coordinates (column, row).
    pub u: f64,
    pub v: f64,
    /// Camera-frame z, m.
    pub depth: f64,
}

impl CameraModel {
    pub fn new(
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        (width, height): (usize, usize),
        rotation: Rotation3<f64>,
        translation: Vec3,
    ) -> Result<Self> {
        let camera = Self { fx, fy, cx, cy, width, height, rotation, translation };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at `eye` looking at `target`, with image "down" aligned to `down`
    /// as far as the viewing direction allows.
    pub fn look_at(
        intrinsics: (f64, f64, f64, f64),
        size: (usize, usize),
        eye: Vec3,
        target: Vec3,
        down: Vec3,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("camera eye coincides with target".into()))?;
        let down = (down - forward * forward.dot(&down))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("down vector parallel to view direction".into()))?;
        let right = down.cross(&forward);
        // Rows of the world-to-camera rotation are the camera axes in world coordinates.
        let rotation = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]));
        let translation = -(rotation * eye);
        Self::new(intrinsics, size, rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Camera centre in world coordinates.
    pub fn eye(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    /// Projects a world point; `None` when it lies behind the camera.
    pub fn project(&self, world: &Vec3) -> Option<Projection> {
        let c = self.to_camera(world);
        if c.z <= 1e-9 {
            return None;
        }
        Some(Projection {
            u: self.fx * c.x / c.z + self.cx,
            v: self.fy * c.y / c.z + self.cy,
            depth: c.z,
        })
    }

    pub fn in_image(&self, p: &Projection) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64
    }

    /// Inverse of [`project`](Self::project) for a pixel and a depth.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.rotation.inverse() * (c - self.translation)
    }
}

/// How points are bucketed and splatted when resolving visibility.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityParams {
    /// Bucket edge length in pixels.
    pub bucket_px: f64,
    /// Each point also occludes buckets within this Chebyshev radius.
    /// Zero reduces to plain per-bucket depth-closest selection.
    pub splat_radius: usize,
    /// A point survives when it is at most this far (m) behind the
    /// splatted depth at its own bucket.
    pub depth_tolerance: f64,
}

impl Default for VisibilityParams {
    fn default() -> Self {
        Self { bucket_px: 1.0, splat_radius: 1, depth_tolerance: 0.01 }
    }
}

impl VisibilityParams {
    /// Only the depth-closest point per pixel, no splatting.
    pub fn per_pixel() -> Self {
        Self { bucket_px: 1.0, splat_radius: 0, depth_tolerance: 0.0 }
    }
}

/// Resolves which points are visible.
///
/// Points behind the camera or outside the image are culled, every point
/// splats its depth over a small neighbourhood, points lying behind the
/// splatted surface are discarded and finally one depth-closest point is
/// kept per bucket (ties go to the lower index). Returns ascending indices
/// together with their projections.
pub fn zbuffer_visible(
    camera: &CameraModel,
    points: &[Vec3],
    params: &VisibilityParams,
) -> Vec<(usize, Projection)> {
    let cols = (camera.width as f64 / params.bucket_px).ceil() as usize;
    let rows = (camera.height as f64 / params.bucket_px).ceil() as usize;
    let bucket_of = |p: &Projection| {
        let bx = ((p.u / params.bucket_px) as usize).min(cols - 1);
        let by = ((p.v / params.bucket_px) as usize).min(rows - 1);
        (bx, by)
    };

    let projected: Vec<Option<(Projection, (usize, usize))>> = points
        .iter()
        .map(|x| {
            camera
                .project(x)
                .filter(|p| camera.in_image(p))
                .map(|p| (p, bucket_of(&p)))
        })
        .collect();

    let mut depth = vec![f64::INFINITY; cols * rows];
    let r = params.splat_radius;
    for (p, (bx, by)) in projected.iter().flatten() {
        for y in by.saturating_sub(r)..=(by + r).min(rows - 1) {
            for x in bx.saturating_sub(r)..=(bx + r).min(cols - 1) {
                let cell = &mut depth[y * cols + x];
                if p.depth < *cell {
                    *cell = p.depth;
                }
            }
        }
    }

    let mut winner: Vec<Option<usize>> = vec![None; cols * rows];
    for (i, entry) in projected.iter().enumerate() {
        let Some((p, (bx, by))) = entry else { continue };
        let cell = by * cols + bx;
        if p.depth > depth[cell] + params.depth_tolerance {
            continue;
        }
        match winner[cell] {
            Some(j) if projected[j].unwrap().0.depth <= p.depth => {}
            _ => winner[cell] = Some(i),
        }
    }

    let mut visible: Vec<(usize, Projection)> = winner
        .into_iter()
        .flatten()
        .map(|i| (i, projected[i].unwrap().0))
        .collect();
    visible.sort_unstable_by_key(|(i, _)| *i);
    visible
}
