//! Per-frame correspondence between the reference model and an observation.
//!
//! Visibility selects the reference points the camera can see, every
//! visible/observed pair is scored by descriptor agreement times a Gaussian
//! distance kernel, a maximum-weight one-to-one assignment picks the
//! matches, and matched reference descriptors drift toward their
//! observations with an exponential moving average.

mod assignment;
mod packed;

use std::collections::HashMap;
use std::io::Write;

use byteorder::{LittleEndian as LE, WriteBytesExt};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::camera::{zbuffer_visible, CameraModel, VisibilityParams};
use crate::error::{invalid, Result};
use crate::refmodel::{Descriptor, ReferenceModel, ReferencePoint};
use crate::Vec3;

pub use assignment::{max_weight_matching, SparseWeights};
use packed::{DotKernel, PackedDescriptors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedPoint {
    /// Back-projected position, m.
    pub position: Vec3,
    /// Image coordinates (column, row), px.
    pub pixel: [f64; 2],
    pub descriptor: Descriptor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreParams {
    /// Width of the Gaussian distance kernel, m.
    pub sigma_kernel: f64,
    /// Pairs scoring at or below this are never matched.
    pub score_floor: f64,
    /// Replace the descriptor similarity by 1 (distance-only matching).
    pub geometry_only: bool,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self { sigma_kernel: 0.03, score_floor: 0.05, geometry_only: false }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_kernel > 0.0 && self.sigma_kernel.is_finite()) {
            return Err(invalid(format!("kernel width must be positive, got {}", self.sigma_kernel)));
        }
        if !self.score_floor.is_finite() {
            return Err(invalid("score floor must be finite"));
        }
        Ok(())
    }

    /// Distance beyond which the kernel alone keeps a score at or below the floor.
    pub fn gate_radius(&self) -> f64 {
        if self.score_floor <= 0.0 {
            f64::INFINITY
        } else if self.score_floor >= 1.0 {
            0.0
        } else {
            self.sigma_kernel * (1.0 / self.score_floor).ln().sqrt()
        }
    }
}

/// One matched pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub reference: usize,
    pub observed: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// Sorted by reference index.
    pub pairs: Vec<Pair>,
    pub unmatched_reference: Vec<usize>,
    pub unmatched_observed: Vec<usize>,
}

impl Matching {
    pub fn total_score(&self) -> f64 {
        self.pairs.iter().map(|p| p.score).sum()
    }

    pub fn mean_score(&self) -> f64 {
        if self.pairs.is_empty() {
            0.0
        } else {
            self.total_score() / self.pairs.len() as f64
        }
    }

    /// CSV rows `frame_id,ref_index,obs_index,score`; the header only when asked.
    pub fn write_csv(&self, w: &mut impl Write, frame_id: u64, header: bool) -> Result<()> {
        if header {
            writeln!(w, "frame_id,ref_index,obs_index,score")?;
        }
        for p in &self.pairs {
            writeln!(w, "{frame_id},{},{},{}", p.reference, p.observed, p.score)?;
        }
        Ok(())
    }
}

/// Indices of reference points whose current position is depth-closest in its pixel bucket.
pub fn visible_reference_points(
    model: &ReferenceModel,
    camera: &CameraModel,
    params: &VisibilityParams,
) -> Vec<usize> {
    let positions: Vec<Vec3> = model.points.iter().map(|p| p.current_position).collect();
    zbuffer_visible(camera, &positions, params).into_iter().map(|(i, _)| i).collect()
}

/// Score of one reference/observed pair, evaluated in double precision.
pub fn score(reference: &ReferencePoint, observed: &ObservedPoint, params: &ScoreParams) -> Result<f64> {
    let d2 = (reference.current_position - observed.position).norm_squared();
    let kernel = (-d2 / (params.sigma_kernel * params.sigma_kernel)).exp();
    if params.geometry_only {
        return Ok(kernel);
    }
    Ok(reference.descriptor.multiscale_cosine(&observed.descriptor)? * kernel)
}

/// Dense score matrix, rows = reference points, columns = observed points.
pub fn score_matrix(
    visible: &[&ReferencePoint],
    observed: &[ObservedPoint],
    params: &ScoreParams,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    let mut s = DMatrix::zeros(visible.len(), observed.len());
    for (i, r) in visible.iter().enumerate() {
        for (j, q) in observed.iter().enumerate() {
            s[(i, j)] = score(r, q, params)?;
        }
    }
    Ok(s)
}

/// Scores above the floor only, row-major over the visible reference points.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedScores {
    pub n_rows: usize,
    pub n_cols: usize,
    /// `rows[i]` holds `(observed index, score)` in increasing observed index.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl GatedScores {
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Dense dump: `u64 rows, u64 cols`, then row-major `f32`; gated entries are 0.
    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_u64::<LE>(self.n_rows as u64)?;
        w.write_u64::<LE>(self.n_cols as u64)?;
        let mut dense = vec![0f32; self.n_cols];
        for row in &self.rows {
            dense.iter_mut().for_each(|x| *x = 0.0);
            for &(j, s) in row {
                dense[j] = s as f32;
            }
            for x in &dense {
                w.write_f32::<LE>(*x)?;
            }
        }
        Ok(())
    }
}

fn check_dims(model: &ReferenceModel, observed: &[ObservedPoint]) -> Result<()> {
    let dims = model.descriptor_dims();
    match observed.iter().position(|q| q.descriptor.dims() != dims) {
        Some(j) => Err(invalid(format!("observed point {j} has descriptor dimensions unlike the model"))),
        None => Ok(()),
    }
}

/// Fast scoring of the visible reference points against an observation.
///
/// Pairs whose kernel alone cannot lift them above the floor are skipped via
/// a spatial grid; the remaining pairs accumulate the multi-scale cosine scale
/// by scale and stop early once even perfect agreement on the remaining
/// scales could not exceed the floor. Descriptor dot products run in `f32`.
pub fn gated_scores(
    model: &ReferenceModel,
    visible: &[usize],
    observed: &[ObservedPoint],
    params: &ScoreParams,
) -> Result<GatedScores> {
    params.validate()?;
    check_dims(model, observed)?;
    let n_cols = observed.len();
    let mut rows = vec![Vec::new(); visible.len()];
    if visible.is_empty() || observed.is_empty() {
        return Ok(GatedScores { n_rows: visible.len(), n_cols, rows });
    }

    let dims = model.descriptor_dims();
    let kernel = DotKernel::detect();
    let (ref_packed, obs_packed) = if params.geometry_only {
        (None, None)
    } else {
        (
            Some(PackedDescriptors::new(&dims, visible.iter().map(|&i| &model.points[i].descriptor))),
            Some(PackedDescriptors::new(&dims, observed.iter().map(|q| &q.descriptor))),
        )
    };
    let inv_s2 = 1.0 / (params.sigma_kernel * params.sigma_kernel);
    let floor = params.score_floor;
    let radius = params.gate_radius();

    let grid = SpatialGrid::new(observed.iter().map(|q| q.position), radius);
    // Slightly past the gate so that rounding never drops a pair the kernel keeps.
    let radius2 = (radius * (1.0 + 1e-9)).powi(2);
    // Rows in one grid cell share their candidate set, so they are scored as
    // a block: each observed descriptor is loaded once for up to four rows.
    let mut order: Vec<(Option<[i64; 3]>, usize)> = (0..visible.len())
        .map(|row| {
            let key = (grid.cell > 0.0).then(|| SpatialGrid::key(&model.points[visible[row]].current_position, grid.cell));
            (key, row)
        })
        .collect();
    order.sort_unstable();
    let mut candidates = Vec::new();
    // (observed index, row, kernel, accumulated cosine), ordered by observed index.
    let mut live: Vec<(usize, usize, f64, f64)> = Vec::new();
    for group in order.chunk_by(|a, b| a.0 == b.0) {
        let x0 = model.points[visible[group[0].1]].current_position;
        grid.query(&x0, &mut candidates);
        live.clear();
        for &j in &candidates {
            for &(_, row) in group {
                let d2 = (model.points[visible[row]].current_position - observed[j].position).norm_squared();
                if d2 > radius2 {
                    continue;
                }
                let k = (-d2 * inv_s2).exp();
                if k > floor {
                    live.push((j, row, k, 0.0));
                }
            }
        }
        if let (Some(rp), Some(op)) = (&ref_packed, &obs_packed) {
            let n_scales = rp.n_scales();
            for s in 0..n_scales {
                let (lo, hi) = (rp.offsets[s], rp.offsets[s + 1]);
                for run in live.chunk_by_mut(|a, b| a.0 == b.0) {
                    let b = &op.row(run[0].0)[lo..hi];
                    let mut chunks = run.chunks_exact_mut(4);
                    for chunk in &mut chunks {
                        let a = [0, 1, 2, 3].map(|i| &rp.row(chunk[i].1)[lo..hi]);
                        for (entry, dot) in chunk.iter_mut().zip(kernel.dot4(b, a)) {
                            entry.3 += dot as f64;
                        }
                    }
                    for entry in chunks.into_remainder() {
                        entry.3 += kernel.dot(b, &rp.row(entry.1)[lo..hi]) as f64;
                    }
                }
                // Even perfect agreement on the remaining scales cannot lift these above the floor.
                let remaining = (n_scales - s - 1) as f64 / n_scales as f64;
                live.retain(|&(_, _, k, partial)| k * (partial + remaining) > floor);
            }
        } else {
            live.iter_mut().for_each(|e| e.3 = 1.0);
        }
        for &(j, row, k, cos) in &live {
            let score = k * cos;
            if score > floor {
                rows[row].push((j, score));
            }
        }
    }
    Ok(GatedScores { n_rows: visible.len(), n_cols, rows })
}

/// Uniform hash grid over observed positions with cell size equal to the gate radius.
struct SpatialGrid {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
    all: Vec<usize>,
}

impl SpatialGrid {
    fn new(points: impl Iterator<Item = Vec3>, radius: f64) -> Self {
        let points: Vec<Vec3> = points.collect();
        let usable = radius.is_finite() && radius > 0.0;
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        if usable {
            for (j, p) in points.iter().enumerate() {
                buckets.entry(Self::key(p, radius)).or_default().push(j);
            }
        }
        let all = if usable || radius == 0.0 { Vec::new() } else { (0..points.len()).collect() };
        Self { cell: if usable { radius } else { 0.0 }, buckets, all }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Candidates in the 27 surrounding cells, in increasing index.
    fn query(&self, x: &Vec3, out: &mut Vec<usize>) {
        out.clear();
        if self.cell == 0.0 {
            out.extend_from_slice(&self.all);
            return;
        }
        let [cx, cy, cz] = Self::key(x, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = self.buckets.get(&[cx + dx, cy + dy, cz + dz]) {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// Maximum total-score one-to-one assignment on a dense matrix.
///
/// Equivalent to padding the matrix with `score_floor` and solving the
/// classic assignment problem: only pairs strictly above the floor are
/// reported, every other row and column is listed as unmatched.
pub fn optimal_assignment(scores: &DMatrix<f64>, score_floor: f64) -> Matching {
    let rows = (0..scores.nrows())
        .map(|i| (0..scores.ncols()).map(|j| (j, scores[(i, j)])).collect())
        .collect();
    let gated = GatedScores { n_rows: scores.nrows(), n_cols: scores.ncols(), rows };
    assign_gated(&gated, score_floor, |i| i)
}

/// Assigns gated scores; `reference_index` maps a row to the reported reference index.
pub fn assign_gated(scores: &GatedScores, score_floor: f64, reference_index: impl Fn(usize) -> usize) -> Matching {
    let weights = SparseWeights::from_rows(
        scores.n_cols,
        scores
            .rows
            .iter()
            .map(|row| row.iter().map(|&(j, s)| (j, s - score_floor)).collect())
            .collect(),
    );
    let assignment = max_weight_matching(&weights);
    let mut matching = Matching::default();
    let mut observed_used = vec![false; scores.n_cols];
    for (i, j) in assignment.iter().enumerate() {
        match j {
            Some(j) => {
                let score = scores.rows[i].iter().find(|e| e.0 == *j).map(|e| e.1).expect("assigned edge exists");
                observed_used[*j] = true;
                matching.pairs.push(Pair { reference: reference_index(i), observed: *j, score });
            }
            None => matching.unmatched_reference.push(reference_index(i)),
        }
    }
    matching.pairs.sort_by_key(|p| p.reference);
    matching.unmatched_reference.sort_unstable();
    matching.unmatched_observed = (0..scores.n_cols).filter(|&j| !observed_used[j]).collect();
    matching
}

/// Scores and assigns one frame; pair reference indices are model indices.
pub fn match_frame(
    model: &ReferenceModel,
    visible: &[usize],
    observed: &[ObservedPoint],
    params: &ScoreParams,
) -> Result<(Matching, GatedScores)> {
    let scores = gated_scores(model, visible, observed, params)?;
    let matching = assign_gated(&scores, params.score_floor, |row| visible[row]);
    Ok((matching, scores))
}

/// Padded objective of a row assignment: matched rows contribute
/// `max(score, floor)`, unmatched rows contribute the floor, summed in row order.
pub fn padded_total(scores: &DMatrix<f64>, floor: f64, row_assignment: &[Option<usize>]) -> f64 {
    row_assignment
        .iter()
        .enumerate()
        .map(|(i, j)| j.map_or(floor, |j| scores[(i, j)].max(floor)))
        .fold(0.0, |acc, x| acc + x)
}

/// Row assignment (`row -> column`) of a matching produced by [`optimal_assignment`].
pub fn row_assignment(matching: &Matching, n_rows: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; n_rows];
    for p in &matching.pairs {
        out[p.reference] = Some(p.observed);
    }
    out
}

/// Exponential moving average of matched reference descriptors toward their observations.
///
/// `alpha` is a rate in 1/s; the per-frame weight is `clamp(alpha * dt, 0, 1)`.
/// With `renormalize` every updated scale is rescaled to unit norm.
pub fn update_descriptors(
    model: &mut ReferenceModel,
    matching: &Matching,
    observed: &[ObservedPoint],
    alpha: f64,
    dt: f64,
    renormalize: bool,
) -> Result<()> {
    if !(dt >= 0.0) {
        return Err(invalid(format!("time step must be non-negative, got {dt}")));
    }
    if !alpha.is_finite() {
        return Err(invalid("update rate must be finite"));
    }
    let a = (alpha * dt).clamp(0.0, 1.0);
    if a == 0.0 {
        return Ok(());
    }
    for p in &matching.pairs {
        let target = observed
            .get(p.observed)
            .ok_or_else(|| invalid(format!("observed index {} out of range", p.observed)))?;
        let point = model
            .points
            .get_mut(p.reference)
            .ok_or_else(|| invalid(format!("reference index {} out of range", p.reference)))?;
        if point.descriptor.dims() != target.descriptor.dims() {
            return Err(invalid("descriptor dimensions differ"));
        }
        for (f, q) in point.descriptor.scales_mut().iter_mut().zip(target.descriptor.scales()) {
            for (x, y) in f.iter_mut().zip(q) {
                *x = (1.0 - a) * *x + a * y;
            }
            if renormalize {
                let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    f.iter_mut().for_each(|x| *x /= n);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::RobotConfig;
    use crate::refmodel::Partitioning;
    use approx::assert_abs_diff_eq;

    fn desc(v: &[f64]) -> Descriptor {
        Descriptor::new(vec![v.to_vec()]).unwrap()
    }

    fn ref_point(x: Vec3, d: Descriptor) -> ReferencePoint {
        ReferencePoint { rest_position: x, sigma: 0.0, partition: 0, descriptor: d, current_position: x }
    }

    fn obs(x: Vec3, d: Descriptor) -> ObservedPoint {
        ObservedPoint { position: x, pixel: [0.0, 0.0], descriptor: d }
    }

    #[test]
    fn kernel_examples() {
        let params = ScoreParams { sigma_kernel: 0.02, ..Default::default() };
        let r = ref_point(Vec3::zeros(), desc(&[1.0, 0.0]));
        assert_eq!(score(&r, &obs(Vec3::zeros(), desc(&[2.0, 0.0])), &params).unwrap(), 1.0);
        let s = score(&r, &obs(Vec3::new(0.02, 0.0, 0.0), desc(&[1.0, 0.0])), &params).unwrap();
        assert_abs_diff_eq!(s, (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(score(&r, &obs(Vec3::x(), desc(&[0.0, 1.0])), &params).unwrap(), 0.0);
    }

    #[test]
    fn assignment_two_by_two() {
        let s = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let m = optimal_assignment(&s, 0.05);
        assert_eq!(m.pairs.iter().map(|p| (p.reference, p.observed)).collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert_abs_diff_eq!(m.total_score(), 1.7, epsilon = 1e-15);
    }

    #[test]
    fn floor_leaves_weak_pairs_unmatched() {
        let s = DMatrix::from_row_slice(2, 3, &[0.04, 0.05, 0.0, 0.3, 0.02, 0.01]);
        let m = optimal_assignment(&s, 0.05);
        assert_eq!(m.pairs, vec![Pair { reference: 1, observed: 0, score: 0.3 }]);
        assert_eq!(m.unmatched_reference, vec![0]);
        assert_eq!(m.unmatched_observed, vec![1, 2]);
    }

    #[test]
    fn ema_extremes_and_decay() {
        let rest = RobotConfig::straight(&[0.2, 0.2]);
        let mut model = ReferenceModel {
            points: vec![ref_point(Vec3::zeros(), desc(&[1.0, 0.0, 0.0]))],
            current_config: rest.clone(),
            rest_config: rest,
            partitions: Partitioning::uniform(0.4, 2).unwrap(),
        };
        let target = vec![obs(Vec3::zeros(), desc(&[0.2, 0.6, -0.3]))];
        let matching = Matching {
            pairs: vec![Pair { reference: 0, observed: 0, score: 1.0 }],
            ..Default::default()
        };
        let before = model.points[0].descriptor.clone();
        update_descriptors(&mut model, &matching, &target, 0.1, 0.0, false).unwrap();
        assert_eq!(model.points[0].descriptor, before);

        let distance = |m: &ReferenceModel| {
            m.points[0].descriptor.scales()[0]
                .iter()
                .zip(&target[0].descriptor.scales()[0])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = distance(&model);
        for n in 1..=50 {
            update_descriptors(&mut model, &matching, &target, 0.25, 0.4, false).unwrap();
            assert_abs_diff_eq!(distance(&model), d0 * 0.9f64.powi(n), epsilon = 1e-12);
        }
        update_descriptors(&mut model, &matching, &target, 10.0, 1.0, false).unwrap();
        assert_eq!(model.points[0].descriptor, target[0].descriptor);
        assert!(update_descriptors(&mut model, &matching, &target, 0.1, -1.0, false).is_err());
    }

    #[test]
    fn renormalized_update_keeps_unit_norm() {
        let rest = RobotConfig::straight(&[0.2, 0.2]);
        let mut model = ReferenceModel {
            points: vec![ref_point(Vec3::zeros(), desc(&[1.0, 0.0]))],
            current_config: rest.clone(),
            rest_config: rest,
            partitions: Partitioning::uniform(0.4, 2).unwrap(),
        };
        let target = vec![obs(Vec3::zeros(), desc(&[0.0, 1.0]))];
        let matching = Matching { pairs: vec![Pair { reference: 0, observed: 0, score: 1.0 }], ..Default::default() };
        update_descriptors(&mut model, &matching, &target, 0.5, 1.0, true).unwrap();
        let v = &model.points[0].descriptor.scales()[0];
        assert_abs_diff_eq!(v[0], v[1], epsilon = 1e-15);
        assert_abs_diff_eq!(v[0].hypot(v[1]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn csv_export() {
        let m = Matching {
            pairs: vec![Pair { reference: 3, observed: 7, score: 0.5 }],
            ..Default::default()
        };
        let mut out = Vec::new();
        m.write_csv(&mut out, 12, true).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "frame_id,ref_index,obs_index,score\n12,3,7,0.5\n");
    }

    #[test]
    fn gate_radius_bounds_kernel() {
        let p = ScoreParams { sigma_kernel: 0.03, score_floor: 0.05, geometry_only: false };
        let r = p.gate_radius();
        assert_abs_diff_eq!((-(r * r) / (0.03 * 0.03)).exp(), 0.05, epsilon = 1e-15);
        assert!(ScoreParams { score_floor: 0.0, ..p }.gate_radius().is_infinite());
    }
}
