//! Backbone-driven inverse kinematics.
//!
//! Minimizes `sum_j |p_j - t(xi, sigma_j)|^2` over the feasible domain with
//! a projected Levenberg-Marquardt iteration and a forward-difference
//! Jacobian. Internally each segment is parameterized by its curvature
//! vector `(kappa cos phi, kappa sin phi)` plus length, which is smooth
//! through the straight configuration where `phi` alone is unidentifiable.

use nalgebra::{DMatrix, DVector};

use super::{material_pose, RobotConfig, SegmentConfig};
use crate::error::{Error, Result};
use crate::Vec3;

/// Feasible configuration domain `W`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeasibleDomain {
    /// Upper curvature bound, 1/m.
    pub kappa_max: f64,
    /// Segment lengths on which structural coordinates are measured.
    pub nominal_lengths: Vec<f64>,
    pub length_min: Vec<f64>,
    pub length_max: Vec<f64>,
}

impl FeasibleDomain {
    /// Default domain: `kappa in [0, 20]`, `l in [0.9 l0, 1.3 l0]`.
    pub fn around(nominal_lengths: &[f64]) -> Self {
        Self {
            kappa_max: 20.0,
            nominal_lengths: nominal_lengths.to_vec(),
            length_min: nominal_lengths.iter().map(|l| 0.9 * l).collect(),
            length_max: nominal_lengths.iter().map(|l| 1.3 * l).collect(),
        }
    }

    /// Same domain with every segment length pinned to `lengths`.
    pub fn with_fixed_lengths(&self, lengths: &[f64]) -> Self {
        Self {
            length_min: lengths.to_vec(),
            length_max: lengths.to_vec(),
            ..self.clone()
        }
    }

    pub fn n_segments(&self) -> usize {
        self.nominal_lengths.len()
    }

    pub fn contains(&self, config: &RobotConfig) -> bool {
        config.segments.len() == self.n_segments()
            && config.segments.iter().enumerate().all(|(i, s)| {
                s.kappa >= 0.0
                    && s.kappa <= self.kappa_max + 1e-12
                    && s.length >= self.length_min[i] - 1e-12
                    && s.length <= self.length_max[i] + 1e-12
            })
    }

    /// Length parameters that are fixed, or on a bound that `x - step` would cross.
    fn pinned_lengths(&self, x: &DVector<f64>, step: &DVector<f64>) -> Vec<usize> {
        (0..self.n_segments())
            .map(|i| 3 * i + 2)
            .filter(|&k| {
                let i = k / 3;
                let next = x[k] - step[k];
                self.length_min[i] >= self.length_max[i]
                    || (x[k] <= self.length_min[i] && next < self.length_min[i])
                    || (x[k] >= self.length_max[i] && next > self.length_max[i])
            })
            .collect()
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..self.n_segments() {
            let (kx, ky) = (x[3 * i], x[3 * i + 1]);
            let norm = kx.hypot(ky);
            if norm > self.kappa_max {
                let scale = self.kappa_max / norm;
                x[3 * i] *= scale;
                x[3 * i + 1] *= scale;
            }
            x[3 * i + 2] = x[3 * i + 2].clamp(self.length_min[i], self.length_max[i]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkTarget {
    /// Material coordinate on the domain's nominal layout.
    pub sigma: f64,
    pub position: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct IkOptions {
    pub max_iterations: usize,
    pub fd_step: f64,
    /// Stop once an accepted step lowers the objective by less than this.
    pub tolerance: f64,
    pub initial_damping: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            fd_step: 1e-6,
            tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IkSolution {
    pub config: RobotConfig,
    /// Final objective, sum of squared distances (m^2).
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after the initial guess and after every accepted step.
    pub history: Vec<f64>,
}

fn to_params(config: &RobotConfig) -> DVector<f64> {
    let mut x = DVector::zeros(3 * config.segments.len());
    for (i, s) in config.segments.iter().enumerate() {
        let (kx, ky) = s.curvature_vector();
        x[3 * i] = kx;
        x[3 * i + 1] = ky;
        x[3 * i + 2] = s.length;
    }
    x
}

fn from_params(x: &DVector<f64>) -> RobotConfig {
    RobotConfig::new(
        (0..x.len() / 3)
            .map(|i| SegmentConfig::from_curvature_vector(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
            .collect(),
    )
}

struct Problem<'a> {
    targets: &'a [IkTarget],
    nominal: &'a [f64],
}

impl Problem<'_> {
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let config = from_params(x);
        let mut r = DVector::zeros(3 * self.targets.len());
        for (j, target) in self.targets.iter().enumerate() {
            let p = material_pose(&config, self.nominal, target.sigma)?.position;
            r.fixed_rows_mut::<3>(3 * j).copy_from(&(target.position - p));
        }
        Ok(r)
    }

    fn jacobian(&self, x: &DVector<f64>, r: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(r.len(), x.len());
        let mut probe = x.clone();
        for k in 0..x.len() {
            probe[k] = x[k] + step;
            let rk = self.residuals(&probe)?;
            jac.set_column(k, &((rk - r) / step));
            probe[k] = x[k];
        }
        Ok(jac)
    }
}

/// Solves the backbone IK problem from `initial`, staying inside `domain`.
pub fn inverse_kinematics(
    targets: &[IkTarget],
    initial: &RobotConfig,
    domain: &FeasibleDomain,
    options: &IkOptions,
) -> Result<IkSolution> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("inverse kinematics needs at least one target".into()));
    }
    if initial.segments.len() != domain.n_segments() {
        return Err(Error::InvalidArgument(format!(
            "initial config has {} segments, domain has {}",
            initial.segments.len(),
            domain.n_segments()
        )));
    }
    let problem = Problem {
        targets,
        nominal: &domain.nominal_lengths,
    };

    let mut x = to_params(initial);
    domain.project(&mut x);
    let mut r = problem.residuals(&x)?;
    let mut cost = r.norm_squared();
    let mut history = vec![cost];
    let mut lambda = options.initial_damping;
    let mut converged = cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < options.max_iterations {
        iterations += 1;
        let jac = problem.jacobian(&x, &r, options.fd_step)?;
        let jtj = jac.transpose() * &jac;
        let gradient = jac.transpose() * &r;

        let mut accepted = false;
        while lambda < 1e16 {
            let mut system = jtj.clone();
            for k in 0..x.len() {
                system[(k, k)] += lambda * (jtj[(k, k)] + 1e-9);
            }
            let Some(mut step) = system.clone().cholesky().map(|c| c.solve(&gradient)) else {
                lambda *= 10.0;
                continue;
            };
            // Lengths sitting on a bound the step pushes through are frozen
            // and the step is recomputed in the remaining variables.
            let pinned = domain.pinned_lengths(&x, &step);
            if !pinned.is_empty() {
                let mut reduced = system.clone();
                let mut rhs = gradient.clone();
                for &k in &pinned {
                    reduced.row_mut(k).fill(0.0);
                    reduced.column_mut(k).fill(0.0);
                    reduced[(k, k)] = 1.0;
                    rhs[k] = 0.0;
                }
                match reduced.cholesky() {
                    Some(c) => step = c.solve(&rhs),
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                }
            }
            let mut candidate = &x - step;
            domain.project(&mut candidate);
            let r_new = problem.residuals(&candidate)?;
            let cost_new = r_new.norm_squared();
            if cost_new < cost {
                let improvement = cost - cost_new;
                x = candidate;
                r = r_new;
                cost = cost_new;
                history.push(cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                converged = improvement < options.tolerance || cost == 0.0;
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No descent direction left at any damping: stationary point.
            converged = true;
        }
    }

    let config = from_params(&x).canonical();
    Ok(IkSolution {
        config,
        residual: cost,
        iterations,
        converged,
        history,
    })
}
