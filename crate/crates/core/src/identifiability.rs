//! Sensitivity analysis through the eigenstructure of `J^T J`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{Configuration, KinematicTree};
use crate::measurement::{stacked_jacobian, BodyPair, MarkerModel, Measurement, MeasurementKind};
use crate::params::ParameterLayout;

/// Which end-effectors contribute to a sensitivity analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SensitivityMode {
    SinglePair { k: usize, l: usize },
    ThreeFingers { fingers: [usize; 3] },
    AllPairs,
    /// One finger alone, observed through its own tip.
    Finger { k: usize },
}

impl SensitivityMode {
    /// Sorted end-effectors in scope.
    pub fn end_effectors(&self, n_ee: usize) -> Vec<usize> {
        let mut v = match *self {
            SensitivityMode::SinglePair { k, l } => vec![k, l],
            SensitivityMode::ThreeFingers { fingers } => fingers.to_vec(),
            SensitivityMode::AllPairs => (0..n_ee).collect(),
            SensitivityMode::Finger { k } => vec![k],
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn label(&self) -> String {
        match *self {
            SensitivityMode::SinglePair { k, l } => format!("single_pair_{k}_{l}"),
            SensitivityMode::ThreeFingers { fingers: [a, b, c] } => format!("three_fingers_{a}_{b}_{c}"),
            SensitivityMode::AllPairs => "all_pairs".into(),
            SensitivityMode::Finger { k } => format!("finger_{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityOptions {
    /// Eigenvalues at or below this count as kernel.
    pub threshold: f64,
    /// Translational columns are multiplied by this (metres per radian).
    pub length_scale: f64,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            threshold: 1e-6,
            length_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub mode: SensitivityMode,
    pub kind: MeasurementKind,
    pub layout: ParameterLayout,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Columns match `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// Column-scaled `J^T J`.
    pub gram: DMatrix<f64>,
    pub kernel_dim: usize,
    pub threshold: f64,
    pub length_scale: f64,
    pub n_rows: usize,
}

impl SensitivityReport {
    pub fn n_params(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn identifiable(&self) -> usize {
        self.n_params() - self.kernel_dim
    }

    /// Kernel dimension under another threshold.
    pub fn kernel_dim_at(&self, threshold: f64) -> usize {
        self.eigenvalues.iter().filter(|v| **v <= threshold).count()
    }

    /// Eigenvectors of the kernel eigenvalues, as columns.
    pub fn kernel_basis(&self) -> DMatrix<f64> {
        let n = self.n_params();
        self.eigenvectors.columns(n - self.kernel_dim, self.kernel_dim).into_owned()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SpectrumExport::from(self))?)
    }
}

#[derive(Serialize)]
struct SpectrumExport<'a> {
    mode: &'a SensitivityMode,
    kind: MeasurementKind,
    threshold: f64,
    length_scale: f64,
    n_params: usize,
    kernel_dim: usize,
    identifiable: usize,
    eigenvalues: &'a [f64],
    parameters: Vec<String>,
    kernel_basis: Vec<Vec<f64>>,
}

impl<'a> From<&'a SensitivityReport> for SpectrumExport<'a> {
    fn from(r: &'a SensitivityReport) -> Self {
        let basis = r.kernel_basis();
        SpectrumExport {
            mode: &r.mode,
            kind: r.kind,
            threshold: r.threshold,
            length_scale: r.length_scale,
            n_params: r.n_params(),
            kernel_dim: r.kernel_dim,
            identifiable: r.identifiable(),
            eigenvalues: &r.eigenvalues,
            parameters: r
                .layout
                .slots()
                .iter()
                .map(|s| format!("{}.{}", s.link, s.field.name()))
                .collect(),
            kernel_basis: basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
        }
    }
}

/// Measurements probing `mode` with `kind` at each configuration.
///
/// Contact: every pair in scope at every configuration. Task: one scoped
/// task measurement per configuration. Cartesian: one per end-effector in
/// scope. Measured values are left at zero; only Jacobians are used.
pub fn probe_measurements(
    mode: SensitivityMode,
    kind: MeasurementKind,
    configs: &[Configuration],
    n_ee: usize,
) -> Result<Vec<Measurement>> {
    let scope = mode.end_effectors(n_ee);
    if let Some(&bad) = scope.iter().find(|&&e| e >= n_ee) {
        return Err(Error::InvalidEndEffector { index: bad, count: n_ee });
    }
    let mut out = Vec::new();
    match kind {
        MeasurementKind::Contact => {
            let pairs = BodyPair::among(&scope);
            if pairs.is_empty() {
                return Err(Error::EmptyScope(format!("{} has no contact pairs", mode.label())));
            }
            for pair in pairs {
                out.extend(configs.iter().map(|q| Measurement::contact(q.clone(), pair)));
            }
        }
        MeasurementKind::Task => {
            if scope.len() < 2 {
                return Err(Error::EmptyScope(format!("{} has no relative positions", mode.label())));
            }
            let dim = 3 * (scope.len() - 1);
            out.extend(
                configs
                    .iter()
                    .map(|q| Measurement::task(q.clone(), Some(scope.clone()), vec![0.0; dim])),
            );
        }
        MeasurementKind::Cartesian => {
            for &e in &scope {
                out.extend(
                    configs
                        .iter()
                        .map(|q| Measurement::cartesian(q.clone(), e, Default::default())),
                );
            }
        }
    }
    Ok(out)
}

/// Eigen-analysis of the column-scaled `J^T J` for `mode`.
///
/// `layout` is the full calibration layout; it is restricted to the links
/// on the branches in scope.
pub fn sensitivity(
    tree: &KinematicTree,
    layout: &ParameterLayout,
    configs: &[Configuration],
    kind: MeasurementKind,
    mode: SensitivityMode,
    markers: Option<&MarkerModel>,
    options: &SensitivityOptions,
) -> Result<SensitivityReport> {
    if configs.is_empty() {
        return Err(Error::EmptyScope("no sample configurations".into()));
    }
    let n_ee = tree.n_end_effectors();
    let scope = mode.end_effectors(n_ee);
    let ms = probe_measurements(mode, kind, configs, n_ee)?;
    let restricted = layout.restrict_to_links(&tree.links_of(&scope)?);
    if restricted.is_empty() {
        return Err(Error::EmptyScope(format!("{} has no calibrated parameters", mode.label())));
    }
    let jac = stacked_jacobian(tree, &restricted, &ms, markers)?;
    Ok(report_from_jacobian(&jac, restricted, kind, mode, options))
}

/// Builds a report from an already assembled Jacobian.
pub fn report_from_jacobian(
    jac: &DMatrix<f64>,
    layout: ParameterLayout,
    kind: MeasurementKind,
    mode: SensitivityMode,
    options: &SensitivityOptions,
) -> SensitivityReport {
    let scales = layout.column_scales(options.length_scale);
    let mut scaled = jac.clone();
    for (mut col, s) in scaled.column_iter_mut().zip(scales.iter()) {
        col *= *s;
    }
    let gram = scaled.transpose() * &scaled;
    let (eigenvalues, eigenvectors) = sorted_eigen(&gram);
    let kernel_dim = eigenvalues.iter().filter(|v| **v <= options.threshold).count();
    SensitivityReport {
        mode,
        kind,
        layout,
        eigenvalues,
        eigenvectors,
        gram,
        kernel_dim,
        threshold: options.threshold,
        length_scale: options.length_scale,
        n_rows: jac.nrows(),
    }
}

/// Symmetric eigendecomposition sorted by descending eigenvalue.
pub(crate) fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Outcome of [`kernel_included`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelInclusion {
    pub included: bool,
    /// Largest `|J_t v| / |J_t|` over unit contact-kernel vectors `v`.
    pub max_violation: f64,
    /// Index (into the contact report's kernel basis) of the worst vector.
    pub worst: Option<usize>,
}

/// Checks `kernel(J_c^T J_c) ⊆ kernel(J_t^T J_t)` on a shared layout.
///
/// `|J_t|` is the spectral norm, so the violation of each kernel vector is
/// `sqrt(v^T G_t v / lambda_max(G_t))`.
pub fn kernel_included(
    report_c: &SensitivityReport,
    report_t: &SensitivityReport,
    tol: f64,
) -> Result<KernelInclusion> {
    if report_c.layout != report_t.layout || report_c.length_scale != report_t.length_scale {
        return Err(Error::LayoutMismatch(
            "kernel inclusion needs reports on the same scaled layout".into(),
        ));
    }
    let lmax = report_t.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let basis = report_c.kernel_basis();
    let mut worst = None;
    let mut max_violation: f64 = 0.0;
    for (i, v) in basis.column_iter().enumerate() {
        let v = v.into_owned();
        let quad = (v.transpose() * &report_t.gram * &v)[(0, 0)].max(0.0);
        let viol = if lmax > 0.0 { (quad / lmax).sqrt() } else { 0.0 };
        if viol > max_violation || worst.is_none() {
            max_violation = max_violation.max(viol);
            worst = Some(i);
        }
    }
    Ok(KernelInclusion {
        included: max_violation <= tol,
        max_violation,
        worst,
    })
}

/// Task-space uncertainty implied by a parameter covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskPropagation {
    /// Per test configuration, the standard deviation of each task row.
    pub per_sample: Vec<Vec<f64>>,
    /// Mean and max over samples of the per-finger positional std
    /// `sqrt(var_x + var_y + var_z)`.
    pub mean: f64,
    pub max: f64,
}

/// `diag(J_t cov J_t^T)` over a test set, `J_t` taken on the full hand.
pub fn propagate_to_task(
    cov_theta: &DMatrix<f64>,
    tree: &KinematicTree,
    layout: &ParameterLayout,
    test_set: &[Configuration],
) -> Result<TaskPropagation> {
    if cov_theta.nrows() != layout.len() || cov_theta.ncols() != layout.len() {
        return Err(Error::DimensionMismatch {
            what: "covariance vs layout",
            expected: layout.len(),
            got: cov_theta.nrows(),
        });
    }
    check_psd(cov_theta)?;
    let n_ee = tree.n_end_effectors();
    let mut per_sample = Vec::with_capacity(test_set.len());
    let mut norms = Vec::new();
    for q in test_set {
        let dim = 3 * n_ee.saturating_sub(1);
        let m = Measurement::task(q.clone(), None, vec![0.0; dim]);
        let j = stacked_jacobian(tree, layout, std::slice::from_ref(&m), None)?;
        let jc = &j * cov_theta;
        let var: DVector<f64> = DVector::from_iterator(
            j.nrows(),
            (0..j.nrows()).map(|r| jc.row(r).dot(&j.row(r)).max(0.0)),
        );
        for chunk in var.as_slice().chunks(3) {
            norms.push(chunk.iter().sum::<f64>().sqrt());
        }
        per_sample.push(var.iter().map(|v| v.sqrt()).collect());
    }
    let mean = if norms.is_empty() {
        0.0
    } else {
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    let max = norms.iter().copied().fold(0.0, f64::max);
    Ok(TaskPropagation { per_sample, mean, max })
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let asym = (m - m.transpose()).amax();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let (values, _) = sorted_eigen(m);
    let min = *values.last().unwrap();
    if asym > 1e-9 * scale || min < -1e-10 * scale {
        return Err(Error::NotPsd(min));
    }
    Ok(())
}
