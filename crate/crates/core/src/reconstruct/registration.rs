//! Least-squares rigid registration of matched point sets.

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self` after `other`: `x -> self(other(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Sum of squared distances between transformed `src` points and `dst`.
    pub fn residual(&self, src: &[Vec3], dst: &[Vec3]) -> f64 {
        src.iter().zip(dst).map(|(p, q)| (self.apply(p) - q).norm_squared()).sum()
    }
}

/// Registration result with its objective value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    /// `sum_i |R p_i + t - q_i|^2`, m^2.
    pub residual: f64,
}

/// Rigid transform minimizing `sum |R p_i + t - q_i|^2` (Kabsch with reflection correction).
pub fn estimate_partition_transform(reference: &[Vec3], observed: &[Vec3]) -> Result<Registration> {
    if reference.len() != observed.len() {
        return Err(Error::InvalidArgument("point lists differ in length".into()));
    }
    let n = reference.len();
    if n < 3 {
        return Err(Error::InsufficientData { required: 3, got: n });
    }
    let inv_n = 1.0 / n as f64;
    let pc = reference.iter().sum::<Vec3>() * inv_n;
    let qc = observed.iter().sum::<Vec3>() * inv_n;

    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (p, q) in reference.iter().zip(observed) {
        let (a, b) = (p - pc, q - qc);
        scatter += a * a.transpose();
        cross += a * b.transpose();
    }
    // Rotation about a line through collinear points is not observable.
    let mut spread = scatter.symmetric_eigenvalues().as_slice().to_vec();
    spread.sort_by(|a, b| b.total_cmp(a));
    if !(spread[0] > 0.0) || spread[1] <= 1e-12 * spread[0] {
        return Err(Error::DegenerateGeometry("reference points are collinear or coincident".into()));
    }

    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = Rotation3::from_matrix_unchecked(v * correction * u.transpose());
    let transform = RigidTransform { rotation, translation: qc - rotation * pc };
    Ok(Registration { residual: transform.residual(reference, observed), transform })
}
