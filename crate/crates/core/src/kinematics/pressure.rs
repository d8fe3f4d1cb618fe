//! Linear pressure to arc-length regression, `l_i = k_i^T P_i + l0_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHAMBERS_PER_SEGMENT: usize = 3;
/// Admissible chamber pressure, kPa.
pub const MAX_PRESSURE_KPA: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPressureModel {
    /// m/kPa per chamber.
    pub k: [f64; CHAMBERS_PER_SEGMENT],
    /// Nominal length at zero pressure, m.
    pub l0: f64,
}

impl SegmentPressureModel {
    pub fn predict(&self, pressures: &[f64]) -> f64 {
        self.k.iter().zip(pressures).map(|(k, p)| k * p).sum::<f64>() + self.l0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureModel {
    #[serde(rename = "pressure_model")]
    pub segments: Vec<SegmentPressureModel>,
}

impl PressureModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    /// Checks that predicted lengths stay positive over the whole pressure box.
    pub fn validate(&self) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            // The minimum of a linear function over a box sits at a corner.
            let worst = seg.l0
                + seg.k.iter().map(|k| (k * MAX_PRESSURE_KPA).min(0.0)).sum::<f64>();
            if !(worst > 0.0) {
                return Err(Error::Domain(format!(
                    "segment {i} predicts non-positive length {worst} inside the pressure box"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthPrediction {
    pub lengths: Vec<f64>,
    /// Set when any input pressure had to be clamped into `[0, 100]` kPa.
    pub clamped: bool,
}

/// Evaluates the regression for a full pressure vector (3 chambers per segment).
pub fn pressures_to_lengths(model: &PressureModel, pressures: &[f64]) -> Result<LengthPrediction> {
    let expected = CHAMBERS_PER_SEGMENT * model.segments.len();
    if pressures.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "expected {expected} chamber pressures, got {}",
            pressures.len()
        )));
    }
    let mut clamped = false;
    let bounded: Vec<f64> = pressures
        .iter()
        .map(|&p| {
            let c = if p.is_nan() { 0.0 } else { p.clamp(0.0, MAX_PRESSURE_KPA) };
            clamped |= c != p;
            c
        })
        .collect();
    if clamped {
        log::warn!("chamber pressure outside [0, {MAX_PRESSURE_KPA}] kPa clamped");
    }
    let lengths = model
        .segments
        .iter()
        .zip(bounded.chunks(CHAMBERS_PER_SEGMENT))
        .map(|(seg, p)| seg.predict(p))
        .collect();
    Ok(LengthPrediction { lengths, clamped })
}

/// One calibration measurement: all chamber pressures and the resulting segment lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureSample {
    pub pressures: Vec<f64>,
    pub lengths: Vec<f64>,
}

/// Ordinary least-squares fit of `(k_i, l0_i)` for every segment.
pub fn fit_pressure_model(samples: &[PressureSample]) -> Result<PressureModel> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("no pressure samples".into()));
    };
    let n_segments = first.lengths.len();
    if n_segments == 0 {
        return Err(Error::InvalidArgument("samples carry no segment lengths".into()));
    }
    for s in samples {
        if s.lengths.len() != n_segments || s.pressures.len() != CHAMBERS_PER_SEGMENT * n_segments {
            return Err(Error::InvalidArgument("inconsistent sample dimensions".into()));
        }
    }

    let unknowns = CHAMBERS_PER_SEGMENT + 1;
    let mut segments = Vec::with_capacity(n_segments);
    for seg in 0..n_segments {
        if samples.len() < unknowns {
            return Err(Error::RankDeficient { segment: seg });
        }
        let design = DMatrix::from_fn(samples.len(), unknowns, |row, col| {
            if col < CHAMBERS_PER_SEGMENT {
                samples[row].pressures[CHAMBERS_PER_SEGMENT * seg + col]
            } else {
                1.0
            }
        });
        let rhs = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.lengths[seg]));

        let qr = design.col_piv_qr();
        let r = qr.r();
        let largest = r[(0, 0)].abs();
        let smallest = (0..unknowns).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if !(largest > 0.0) || smallest <= 1e-10 * largest {
            return Err(Error::RankDeficient { segment: seg });
        }
        // Least squares through the thin factors: R x = Q^T b, then undo the pivoting.
        let qtb = qr.q().transpose() * rhs;
        let mut x = r
            .solve_upper_triangular(&qtb)
            .ok_or(Error::RankDeficient { segment: seg })?;
        qr.p().inv_permute_rows(&mut x);

        segments.push(SegmentPressureModel {
            k: [x[0], x[1], x[2]],
            l0: x[3],
        });
    }
    Ok(PressureModel { segments })
}
