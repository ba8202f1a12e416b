//! MAP identification of the calibration parameters.
//!
//! The objective is
//!
//! ```text
//! sum_n |y_n - h(q_n, Theta)|^2 / sigma_m^2 + (Theta - Theta_p)^T Lambda_p^-1 (Theta - Theta_p)
//! ```
//!
//! minimized with a damped Gauss-Newton (Levenberg-Marquardt) iteration.
//! The prior keeps the normal equations positive definite even when the
//! measurements leave directions unobserved.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::KinematicTree;
use crate::measurement::{contact_details, stacked_jacobian, stacked_predict, MarkerModel, Measurement, MeasurementKind};
use crate::params::{ParameterLayout, ParameterVector};

/// Measurement standard deviation per kind (metres).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub task: f64,
    pub cartesian: f64,
    pub contact: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            task: 0.0005,
            cartesian: 0.0005,
            contact: 0.0005,
        }
    }
}

impl NoiseModel {
    pub fn uniform(sigma: f64) -> Self {
        NoiseModel {
            task: sigma,
            cartesian: sigma,
            contact: sigma,
        }
    }

    pub fn sigma(&self, kind: MeasurementKind) -> f64 {
        match kind {
            MeasurementKind::Task => self.task,
            MeasurementKind::Cartesian => self.cartesian,
            MeasurementKind::Contact => self.contact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.task, self.cartesian, self.contact]
            .iter()
            .all(|s| *s > 0.0 && s.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config("noise sigmas must be positive".into()))
        }
    }

    /// Per-row sigma for a stacked dataset.
    pub fn row_sigmas(&self, ms: &[Measurement], n_ee: usize) -> DVector<f64> {
        let v: Vec<f64> = ms
            .iter()
            .flat_map(|m| std::iter::repeat_n(self.sigma(m.kind), m.dim(n_ee)))
            .collect();
        DVector::from_vec(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_cost_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Prior-continuation stages; 0 solves the MAP problem directly.
    pub continuation_stages: usize,
    /// Prior standard-deviation factor of the first continuation stage.
    pub continuation_start: f64,
    /// Contacts whose capsule axes are closer than this fraction of the
    /// radii sum at the initial estimate have an ambiguous side; a seed
    /// solve without them warm-starts an extra full solve. 0 disables it.
    pub side_gap_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 200,
            gradient_tolerance: 1e-10,
            relative_cost_tolerance: 1e-12,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            continuation_stages: 4,
            continuation_start: 1e-3,
            side_gap_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    CostChange,
    MaxIterations,
    /// Damping grew without finding a decreasing step.
    Stalled,
}

/// Whitened residual model: `r(x) = (y - h(x)) / sigma`.
pub trait ResidualModel {
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// Jacobian of [`ResidualModel::residuals`].
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// Output of [`solve_map`].
#[derive(Debug, Clone)]
pub struct MapSolution {
    pub x: DVector<f64>,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Gauss-Newton information matrix `J^T J + diag(sigma_p^-2)` at `x`.
    pub information: DMatrix<f64>,
}

fn prior_terms(x: &DVector<f64>, mean: &DVector<f64>, precision: &DVector<f64>) -> (f64, DVector<f64>) {
    let dx = x - mean;
    let cost = dx.iter().zip(precision.iter()).map(|(d, p)| d * d * p).sum();
    (cost, dx.component_mul(precision))
}

/// Relative cost band treated as rounding noise.
const FLAT_COST: f64 = 1e-13;

/// Levenberg-Marquardt on the MAP objective.
///
/// Damping is Marquardt-scaled by the information diagonal, multiplied by
/// `damping_increase` on rejected steps and divided by `damping_decrease`
/// on accepted ones. Steps are accepted when they lower the objective, or,
/// when the change is within rounding of the cost, when they halve the
/// gradient; the recorded cost trace never increases.
pub fn solve_map(
    model: &dyn ResidualModel,
    x0: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_precision: &DVector<f64>,
    options: &SolverOptions,
) -> Result<MapSolution> {
    let n = x0.len();
    let mut x = x0.clone();
    let r = model.residuals(&x)?;
    let (pc, _) = prior_terms(&x, prior_mean, prior_precision);
    let mut cost = r.norm_squared() + pc;
    if !cost.is_finite() {
        return Err(Error::NonFiniteObjective {
            iteration: 0,
            theta: x.as_slice().to_vec(),
        });
    }
    let mut trace = vec![cost];
    let mut lambda = options.initial_damping;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut jac = model.jacobian(&x)?;

    let gradient = |jac: &DMatrix<f64>, r: &DVector<f64>, x: &DVector<f64>| {
        let (_, prior_grad) = prior_terms(x, prior_mean, prior_precision);
        jac.transpose() * r + prior_grad
    };
    let mut grad = gradient(&jac, &r, &x);

    while iterations < options.max_iterations {
        if cost == 0.0 || grad.amax() < options.gradient_tolerance {
            termination = Termination::Gradient;
            break;
        }
        let mut info = jac.transpose() * &jac;
        for i in 0..n {
            info[(i, i)] += prior_precision[i];
        }
        iterations += 1;

        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = info.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * info[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= options.damping_increase;
                continue;
            };
            let step = chol.solve(&(-&grad));
            let x_new = &x + &step;
            let r_new = model.residuals(&x_new)?;
            let (pc_new, _) = prior_terms(&x_new, prior_mean, prior_precision);
            let cost_new = r_new.norm_squared() + pc_new;
            if !cost_new.is_finite() {
                return Err(Error::NonFiniteObjective {
                    iteration: iterations,
                    theta: x_new.as_slice().to_vec(),
                });
            }
            // Within rounding of the cost, the gradient decides.
            let flat = cost_new <= cost * (1.0 + FLAT_COST) && cost_new >= cost * (1.0 - FLAT_COST);
            if cost_new < cost || flat {
                let jac_new = model.jacobian(&x_new)?;
                let grad_new = gradient(&jac_new, &r_new, &x_new);
                let gradient_progress = grad_new.amax() < 0.5 * grad.amax();
                if cost_new < cost || gradient_progress {
                    let rel = (cost - cost_new) / cost;
                    x = x_new;
                    cost = cost.min(cost_new);
                    jac = jac_new;
                    grad = grad_new;
                    trace.push(cost);
                    lambda = (lambda / options.damping_decrease).max(1e-15);
                    accepted = true;
                    if rel < options.relative_cost_tolerance && !gradient_progress {
                        termination = Termination::CostChange;
                    }
                    break;
                }
            }
            lambda *= options.damping_increase;
        }
        if !accepted {
            termination = Termination::Stalled;
            break;
        }
        if termination == Termination::CostChange {
            break;
        }
    }

    let mut information = jac.transpose() * &jac;
    for i in 0..n {
        information[(i, i)] += prior_precision[i];
    }
    Ok(MapSolution {
        x,
        cost_trace: trace,
        iterations,
        termination,
        information,
    })
}

/// Residual model for a measurement dataset on a kinematic tree.
pub struct DatasetResiduals<'a> {
    pub tree: &'a KinematicTree,
    pub layout: &'a ParameterLayout,
    pub dataset: &'a [Measurement],
    pub noise: &'a NoiseModel,
    pub markers: Option<&'a MarkerModel>,
    y: DVector<f64>,
    sigma: DVector<f64>,
}

impl<'a> DatasetResiduals<'a> {
    pub fn new(
        tree: &'a KinematicTree,
        layout: &'a ParameterLayout,
        dataset: &'a [Measurement],
        noise: &'a NoiseModel,
        markers: Option<&'a MarkerModel>,
    ) -> Result<Self> {
        for m in dataset {
            m.validate(tree)?;
        }
        let y = DVector::from_iterator(
            dataset.iter().map(|m| m.y.len()).sum(),
            dataset.iter().flat_map(|m| m.y.iter().copied()),
        );
        let sigma = noise.row_sigmas(dataset, tree.n_end_effectors());
        Ok(DatasetResiduals {
            tree,
            layout,
            dataset,
            noise,
            markers,
            y,
            sigma,
        })
    }

    /// Unweighted `y - h(q, Theta)`.
    pub fn raw_residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let t = self.tree.with_values(self.layout, x.as_slice())?;
        Ok(&self.y - stacked_predict(&t, self.dataset, self.markers)?)
    }
}

impl ResidualModel for DatasetResiduals<'_> {
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.raw_residuals(x)?.component_div(&self.sigma))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let t = self.tree.with_values(self.layout, x.as_slice())?;
        let mut j = stacked_jacobian(&t, self.layout, self.dataset, self.markers)?;
        for (mut row, s) in j.row_iter_mut().zip(self.sigma.iter()) {
            row /= -*s;
        }
        Ok(j)
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub theta_star: ParameterVector,
    /// Unweighted residuals `y - h(q, Theta*)`, stacked.
    pub residuals: Vec<f64>,
    pub cost_trace: Vec<f64>,
    pub parameter_covariance: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub termination: Termination,
}

/// MAP objective value at `theta`.
pub fn map_objective(
    dataset: &[Measurement],
    tree: &KinematicTree,
    theta: &ParameterVector,
    noise: &NoiseModel,
    markers: Option<&MarkerModel>,
) -> Result<f64> {
    let model = DatasetResiduals::new(tree, theta.layout(), dataset, noise, markers)?;
    let r = model.residuals(theta.values())?;
    let (pc, _) = prior_terms(theta.values(), theta.prior_mean(), &theta.prior_precision());
    Ok(r.norm_squared() + pc)
}

/// Calibrates `initial`'s layout against the dataset.
///
/// Runs the direct solve, the prior continuation and the side-seeded solve
/// (each when enabled) and returns the lowest-cost solution.
pub fn calibrate(
    dataset: &[Measurement],
    tree: &KinematicTree,
    initial: &ParameterVector,
    noise: &NoiseModel,
    options: &SolverOptions,
    markers: Option<&MarkerModel>,
) -> Result<CalibrationResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    noise.validate()?;
    let model = DatasetResiduals::new(tree, initial.layout(), dataset, noise, markers)?;
    let precision = initial.prior_precision();
    let mut sol = solve_map(&model, initial.values(), initial.prior_mean(), &precision, options)?;
    let mut iterations = sol.iterations;
    if options.continuation_stages > 0 {
        let cont = solve_with_continuation(&model, initial, options)?;
        iterations += cont.iterations;
        if cont.cost_trace.last() < sol.cost_trace.last() {
            sol = cont;
        }
    }
    if let Some(seeded) = solve_side_seeded(&model, dataset, tree, initial, noise, options, markers)? {
        iterations += seeded.iterations;
        if seeded.cost_trace.last() < sol.cost_trace.last() {
            sol = seeded;
        }
    }
    let residuals = model.raw_residuals(&sol.x)?.as_slice().to_vec();
    let parameter_covariance = invert_information(&sol.information)?;
    Ok(CalibrationResult {
        theta_star: initial.with_values(sol.x)?,
        residuals,
        cost_trace: sol.cost_trace,
        parameter_covariance,
        converged: matches!(sol.termination, Termination::Gradient | Termination::CostChange),
        iterations,
        termination: sol.termination,
    })
}

/// Solves a sequence of MAP problems whose prior standard deviations grow
/// geometrically from `continuation_start * sigma_p` to `sigma_p`, each
/// warm-started from the previous one. Only the last stage's trace is kept.
fn solve_with_continuation(
    model: &DatasetResiduals<'_>,
    initial: &ParameterVector,
    options: &SolverOptions,
) -> Result<MapSolution> {
    let stages = options.continuation_stages;
    let base = initial.prior_precision();
    let mut x = initial.values().clone();
    let mut iterations = 0;
    for k in 0..stages {
        let f = options.continuation_start.powf(1.0 - k as f64 / stages as f64);
        let sol = solve_map(model, &x, initial.prior_mean(), &(&base / (f * f)), options)?;
        iterations += sol.iterations;
        x = sol.x;
    }
    let mut last = solve_map(model, &x, initial.prior_mean(), &base, options)?;
    last.iterations += iterations;
    Ok(last)
}

/// Contact residuals are symmetric in the side from which the capsules
/// touch, so contacts whose axes have crossed under the current estimate
/// pull towards a mirrored solution. Solves without the ambiguous contacts,
/// re-checks ambiguity at the new estimate, and repeats up to
/// `SIDE_ROUNDS` times before a final solve on the full dataset. `None`
/// when nothing is ambiguous at the initial estimate.
fn solve_side_seeded(
    model: &DatasetResiduals<'_>,
    dataset: &[Measurement],
    tree: &KinematicTree,
    initial: &ParameterVector,
    noise: &NoiseModel,
    options: &SolverOptions,
    markers: Option<&MarkerModel>,
) -> Result<Option<MapSolution>> {
    const SIDE_ROUNDS: usize = 4;
    if options.side_gap_fraction <= 0.0 {
        return Ok(None);
    }
    let layout = initial.layout();
    let precision = initial.prior_precision();
    let mut x = initial.values().clone();
    let mut iterations = 0;
    for round in 0..SIDE_ROUNDS {
        let current = tree.with_values(layout, x.as_slice())?;
        let mut unambiguous = Vec::with_capacity(dataset.len());
        for m in dataset {
            if side_is_clear(&current, m, options.side_gap_fraction)? {
                unambiguous.push(m.clone());
            }
        }
        if unambiguous.len() == dataset.len() {
            if round == 0 {
                return Ok(None);
            }
            break;
        }
        if unambiguous.is_empty() {
            return Ok(None);
        }
        let seed_model = DatasetResiduals::new(tree, layout, &unambiguous, noise, markers)?;
        let seed = solve_map(&seed_model, &x, initial.prior_mean(), &precision, options)?;
        iterations += seed.iterations;
        x = seed.x;
    }
    let mut sol = solve_map(model, &x, initial.prior_mean(), &precision, options)?;
    sol.iterations += iterations;
    Ok(Some(sol))
}

/// Whether a contact's capsule axes are at least `fraction` of the radii
/// sum apart. Non-contact measurements always are.
fn side_is_clear(tree: &KinematicTree, m: &Measurement, fraction: f64) -> Result<bool> {
    let (MeasurementKind::Contact, Some(pair)) = (m.kind, m.pair) else {
        return Ok(true);
    };
    let c = contact_details(tree, &m.q, pair)?;
    let radii = tree.end_effector(pair.k)?.capsule.radius + tree.end_effector(pair.l)?.capsule.radius;
    Ok((c.on_second - c.on_first).norm() >= fraction * radii)
}

/// `J^T diag(sigma_m^-2) J + diag(sigma_p^-2)`.
pub fn information_matrix(
    jacobian: &DMatrix<f64>,
    row_sigma: &DVector<f64>,
    prior_sigma: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if jacobian.nrows() != row_sigma.len() || jacobian.ncols() != prior_sigma.len() {
        return Err(Error::DimensionMismatch {
            what: "jacobian vs sigma vectors",
            expected: jacobian.nrows(),
            got: row_sigma.len(),
        });
    }
    let mut w = jacobian.clone();
    for (mut row, s) in w.row_iter_mut().zip(row_sigma.iter()) {
        row /= *s;
    }
    let mut info = w.transpose() * w;
    for (i, s) in prior_sigma.iter().enumerate() {
        if s.is_finite() {
            info[(i, i)] += 1.0 / (s * s);
        }
    }
    Ok(info)
}

/// Inverse of a symmetric information matrix, rejecting numerically
/// singular input.
pub fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = info.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (info + info.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if !(min > 1e-14 * max) {
        return Err(Error::SingularInformation);
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let cov = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok((&cov + cov.transpose()) * 0.5)
}

/// `cov(Theta) = (J^T diag(sigma_m^-2) J + diag(sigma_p^-2))^-1`.
pub fn parameter_covariance_from_jacobian(
    jacobian: &DMatrix<f64>,
    row_sigma: &DVector<f64>,
    prior_sigma: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    invert_information(&information_matrix(jacobian, row_sigma, prior_sigma)?)
}

/// Parameter covariance of `theta` given a dataset, evaluated at `theta`.
pub fn parameter_covariance(
    dataset: &[Measurement],
    tree: &KinematicTree,
    theta: &ParameterVector,
    noise: &NoiseModel,
    markers: Option<&MarkerModel>,
) -> Result<DMatrix<f64>> {
    let bound = tree.with_parameters(theta)?;
    let j = stacked_jacobian(&bound, theta.layout(), dataset, markers)?;
    let sig = noise.row_sigmas(dataset, tree.n_end_effectors());
    parameter_covariance_from_jacobian(&j, &sig, theta.prior_sigma())
}
