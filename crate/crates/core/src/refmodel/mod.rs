//! Static reference model: downsampled surface points with structural
//! coordinates, partition labels and multi-scale appearance descriptors.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kinematics::{forward_kinematics, material_pose, carry_offset, RobotConfig};
use crate::Vec3;

pub use io::{read_model, write_model, MODEL_FORMAT_VERSION};

/// Multi-scale appearance descriptor, one vector per scale.
///
/// Scales are stored separately so the multi-scale cosine can average
/// per-scale similarities directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    scales: Vec<Vec<f64>>,
}

/// Cosine similarity of two equally sized vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Descriptor {
    pub fn new(scales: Vec<Vec<f64>>) -> Result<Self> {
        if scales.is_empty() {
            return Err(invalid("descriptor needs at least one scale"));
        }
        for (s, v) in scales.iter().enumerate() {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("scale {s} is empty or not finite")));
            }
            if norm(v) == 0.0 {
                return Err(invalid(format!("scale {s} has zero norm")));
            }
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[Vec<f64>] {
        &self.scales
    }

    pub(crate) fn scales_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.scales
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.scales.iter().map(Vec::len).collect()
    }

    /// Copy with every scale scaled to unit norm.
    pub fn normalized(&self) -> Self {
        let scales = self
            .scales
            .iter()
            .map(|v| {
                let n = norm(v);
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        Self { scales }
    }

    /// Mean of the per-scale cosine similarities.
    pub fn multiscale_cosine(&self, other: &Descriptor) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(invalid("descriptor dimensions differ"));
        }
        let sum: f64 = self.scales.iter().zip(&other.scales).map(|(a, b)| cosine(a, b)).sum();
        Ok(sum / self.scales.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub rest_position: Vec3,
    /// Arc length of the nearest rest backbone point, m.
    pub sigma: f64,
    pub partition: usize,
    pub descriptor: Descriptor,
    pub current_position: Vec3,
}

/// Contiguous arc-length spans of the rest backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partitioning {
    /// `K + 1` increasing coordinates from 0 to `L`.
    pub boundaries: Vec<f64>,
    /// Base coordinate of every partition (its arc-length midpoint).
    pub base_sigmas: Vec<f64>,
}

impl Partitioning {
    /// `k` spans of equal arc length over `[0, total_length]`.
    pub fn uniform(total_length: f64, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("need at least 2 partitions, got {k}")));
        }
        let boundaries: Vec<f64> = (0..=k).map(|j| j as f64 * total_length / k as f64).collect();
        let base_sigmas = boundaries.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(Self { boundaries, base_sigmas })
    }

    pub fn len(&self) -> usize {
        self.base_sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_sigmas.is_empty()
    }

    /// Partition containing `sigma`; the last span is closed at `L`.
    pub fn label(&self, sigma: f64) -> usize {
        let interior = &self.boundaries[1..self.boundaries.len() - 1];
        interior.iter().filter(|&&b| sigma >= b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub points: Vec<ReferencePoint>,
    pub rest_config: RobotConfig,
    pub current_config: RobotConfig,
    pub partitions: Partitioning,
}

impl ReferenceModel {
    pub fn n_partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Segment lengths of the rest shape; structural coordinates live on this layout.
    pub fn nominal_lengths(&self) -> Vec<f64> {
        self.rest_config.lengths()
    }

    pub fn descriptor_dims(&self) -> Vec<usize> {
        self.points.first().map(|p| p.descriptor.dims()).unwrap_or_default()
    }

    /// Indices of the points in partition `j`.
    pub fn partition_members(&self, j: usize) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| self.points[i].partition == j).collect()
    }

    /// Backbone point at the base coordinate of partition `j` in the current configuration.
    pub fn base_point(&self, j: usize) -> Result<Vec3> {
        let nominal = self.nominal_lengths();
        Ok(material_pose(&self.current_config, &nominal, self.partitions.base_sigmas[j])?.position)
    }

    /// Positions of every surface point under `config`, by surface point kinematics.
    pub fn positions_at(&self, config: &RobotConfig) -> Result<Vec<Vec3>> {
        let nominal = self.nominal_lengths();
        self.points
            .iter()
            .map(|p| {
                let rest = forward_kinematics(&self.rest_config, p.sigma)?;
                let current = material_pose(config, &nominal, p.sigma)?;
                Ok(carry_offset(&rest, &current, &p.rest_position))
            })
            .collect()
    }

    /// Sets the current configuration and moves every point along with it.
    pub fn set_current_config(&mut self, config: RobotConfig) -> Result<()> {
        let positions = self.positions_at(&config)?;
        for (p, x) in self.points.iter_mut().zip(positions) {
            p.current_position = x;
        }
        self.current_config = config;
        Ok(())
    }

    /// Checks the structural invariants of a constructed model.
    pub fn validate(&self) -> Result<()> {
        let k = self.n_partitions();
        if k < 2 {
            return Err(invalid(format!("model has {k} partitions, need at least 2")));
        }
        if self.rest_config.segments.len() != self.current_config.segments.len() {
            return Err(invalid("rest and current configurations differ in segment count"));
        }
        let total = self.rest_config.total_length();
        let b = &self.partitions.boundaries;
        if b.len() != k + 1 || b[0] != 0.0 || (b[k] - total).abs() > 1e-9 * total {
            return Err(invalid("partition boundaries do not cover the backbone"));
        }
        if b.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("partition boundaries not increasing"));
        }
        let dims = self.descriptor_dims();
        let mut counts = vec![0usize; k];
        for (i, p) in self.points.iter().enumerate() {
            if !(0.0..=total).contains(&p.sigma) {
                return Err(invalid(format!("point {i} has sigma {} outside [0, {total}]", p.sigma)));
            }
            if p.partition != self.partitions.label(p.sigma) {
                return Err(invalid(format!("point {i} carries an inconsistent partition label")));
            }
            if p.descriptor.dims() != dims {
                return Err(invalid(format!("point {i} has mismatched descriptor dimensions")));
            }
            counts[p.partition] += 1;
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyPartition { partition: j });
        }
        Ok(())
    }
}

/// Greedy farthest point sampling from a seeded start index.
pub fn farthest_point_sample(points: &[Vec3], n: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(invalid("cannot sample from an empty cloud"));
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len());
    farthest_point_sample_from(points, n, start)
}

/// Farthest point sampling starting at `start`; ties go to the lowest index.
pub fn farthest_point_sample_from(points: &[Vec3], n: usize, start: usize) -> Result<Vec<usize>> {
    if n > points.len() {
        return Err(invalid(format!("requested {n} samples from {} points", points.len())));
    }
    if start >= points.len() {
        return Err(invalid(format!("start index {start} out of range")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut selected = Vec::with_capacity(n);
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == n {
            return Ok(selected);
        }
        let mut best = None;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = (p - points[current]).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if !taken[i] && min_dist[i] > best_dist {
                best_dist = min_dist[i];
                best = Some(i);
            }
        }
        current = best.expect("unselected points remain");
    }
}

/// Multi-view aggregation: per scale, the view vector with the highest
/// mean cosine similarity to all views (itself included).
pub fn aggregate_descriptor(views: &[Descriptor]) -> Result<Descriptor> {
    let Some(first) = views.first() else {
        return Err(invalid("no views to aggregate"));
    };
    let dims = first.dims();
    if views.iter().any(|v| v.dims() != dims) {
        return Err(invalid("views have inconsistent descriptor dimensions"));
    }
    let mut scales = Vec::with_capacity(dims.len());
    for s in 0..dims.len() {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, candidate) in views.iter().enumerate() {
            let sum: f64 = views.iter().map(|v| cosine(&candidate.scales[s], &v.scales[s])).sum();
            let mean = sum / views.len() as f64;
            if mean > best_score {
                best_score = mean;
                best = j;
            }
        }
        scales.push(views[best].scales[s].clone());
    }
    Descriptor::new(scales)
}

/// Structural coordinate of every point: arc length of the closest rest backbone point.
///
/// The backbone is sampled every `L/1000`; the nearest sample is then
/// refined by golden-section search over its two neighbouring intervals.
pub fn assign_kinematics(points: &[Vec3], rest_config: &RobotConfig) -> Result<Vec<f64>> {
    let total = rest_config.total_length();
    let n = 1000;
    let step = total / n as f64;
    let samples: Vec<Vec3> = (0..=n)
        .map(|k| forward_kinematics(rest_config, (k as f64 * step).min(total)).map(|p| p.position))
        .collect::<Result<_>>()?;

    points
        .iter()
        .map(|p| {
            if !p.iter().all(|x| x.is_finite()) {
                return Err(invalid("non-finite surface point"));
            }
            let mut nearest = 0;
            let mut nearest_d = f64::INFINITY;
            for (k, s) in samples.iter().enumerate() {
                let d = (p - s).norm_squared();
                if d < nearest_d {
                    nearest_d = d;
                    nearest = k;
                }
            }
            let lo = nearest.saturating_sub(1) as f64 * step;
            let hi = ((nearest + 1).min(n) as f64 * step).min(total);
            let dist = |s: f64| {
                forward_kinematics(rest_config, s)
                    .map(|pose| (p - pose.position).norm_squared())
                    .unwrap_or(f64::INFINITY)
            };
            let refined = golden_section(dist, lo, hi, 1e-13);
            // Never return something worse than the dense sample.
            let sample_sigma = (nearest as f64 * step).min(total);
            Ok(if dist(refined) <= nearest_d { refined } else { sample_sigma })
        })
        .collect()
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Splits the model into `k` equal arc-length partitions and relabels every point.
pub fn partition_model(mut model: ReferenceModel, k: usize) -> Result<ReferenceModel> {
    let partitions = Partitioning::uniform(model.rest_config.total_length(), k)?;
    let mut counts = vec![0usize; k];
    for p in &mut model.points {
        p.partition = partitions.label(p.sigma);
        counts[p.partition] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyPartition { partition: j });
    }
    model.partitions = partitions;
    Ok(model)
}

/// Builds a reference model from a surface cloud and its per-view descriptors.
///
/// `views[i]` lists the descriptors of point `i` from every view that saw
/// it. The pipeline is: farthest point sampling, multi-view aggregation,
/// structural coordinates, partitioning.
pub fn build_reference_model(
    points: &[Vec3],
    views: &[Vec<Descriptor>],
    rest_config: &RobotConfig,
    n_sample: usize,
    k: usize,
    seed: u64,
) -> Result<ReferenceModel> {
    if k < 2 {
        return Err(invalid(format!("need at least 2 partitions, got {k}")));
    }
    if views.len() != points.len() {
        return Err(invalid(format!(
            "{} points but {} descriptor view lists",
            points.len(),
            views.len()
        )));
    }
    let chosen = farthest_point_sample(points, n_sample, seed)?;
    let positions: Vec<Vec3> = chosen.iter().map(|&i| points[i]).collect();
    let sigmas = assign_kinematics(&positions, rest_config)?;
    let mut reference_points = Vec::with_capacity(chosen.len());
    for ((&i, position), sigma) in chosen.iter().zip(positions).zip(sigmas) {
        let descriptor = aggregate_descriptor(&views[i])
            .map_err(|e| invalid(format!("point {i}: {e}")))?;
        reference_points.push(ReferencePoint {
            rest_position: position,
            sigma,
            partition: 0,
            descriptor,
            current_position: position,
        });
    }
    let model = ReferenceModel {
        points: reference_points,
        rest_config: rest_config.clone(),
        current_config: rest_config.clone(),
        partitions: Partitioning::uniform(rest_config.total_length(), k)?,
    };
    let model = partition_model(model, k)?;
    model.validate()?;
    Ok(model)
}
