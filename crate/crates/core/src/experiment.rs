//! Seeded, config-driven experiments: sensitivity spectra, the simulation
//! study over perturbed ground truths, cross-validated calibration and the
//! JSON/CSV reports they produce.
//!
//! Every report carries the SHA-256 hash of the effective configuration,
//! and every random stream is derived from `seed`, so a config reproduces
//! byte-identical outputs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::{calibrate, NoiseModel, SolverOptions};
use crate::identifiability::{
    kernel_included, propagate_to_task, sensitivity, KernelInclusion, SensitivityMode, SensitivityOptions,
    SensitivityReport,
};
use crate::kinematics::{Configuration, KinematicTree};
use crate::measurement::{h_contact, BodyPair, Measurement, MeasurementKind};
use crate::model::HandModel;
use crate::oed::{select, select_greedy, CandidatePool, DetmaxOptions, SelectionMethod, SelectionResult};
use crate::params::ParameterLayout;
use crate::rng::{derive_seed, substream};
use crate::sampling::{
    generate_search_trajectories, perturb, random_configuration, simulate_contact, task_errors,
    uniform_task_test_set, GridOptions, SearchTrajectory, TrajectoryOptions,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

const TAG_TEST_SET: u64 = 0x7e57;
const TAG_PROBES: u64 = 0x5e45;
const TAG_TRAJ: u64 = 0x7a1;
const TAG_TRUTH: u64 = 0x6d0d;
const TAG_TRIGGER: u64 = 0xe95;
const TAG_RANDOM: u64 = 0x4a4d;
const TAG_FOLDS: u64 = 0xf01d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestSetConfig {
    pub size: usize,
    pub grid: GridOptions,
}

impl Default for TestSetConfig {
    fn default() -> Self {
        TestSetConfig {
            size: 1000,
            grid: GridOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub per_pair: usize,
    pub search: TrajectoryOptions,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            per_pair: 150,
            search: TrajectoryOptions::default(),
        }
    }
}

/// Uniform ground-truth perturbation of every calibrated DH field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub rot_deg: f64,
    pub trans: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            rot_deg: 5.0,
            trans: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Ground-truth index used by `simulate` and `calibrate`.
    pub ground_truth: u64,
    /// Standard deviation of the contact trigger offset; `None` uses the
    /// contact noise of the estimation model.
    pub trigger_sigma: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            ground_truth: 0,
            trigger_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub models: Vec<String>,
    pub configs_per_pair: usize,
    pub threshold: f64,
    pub length_scale: f64,
    pub inclusion_tolerance: f64,
    pub single_pair: [usize; 2],
    pub three_fingers: [usize; 3],
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            models: vec!["builtin:dlr_like".into(), "builtin:generic".into()],
            configs_per_pair: 100,
            threshold: 1e-6,
            length_scale: 0.1,
            inclusion_tolerance: 1e-4,
            single_pair: [0, 1],
            three_fingers: [0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub method: SelectionMethod,
    pub budget: usize,
    pub detmax: DetmaxOptions,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            method: SelectionMethod::Greedy,
            budget: 300,
            detmax: DetmaxOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_models: usize,
    pub budgets: Vec<usize>,
    pub methods: Vec<SelectionMethod>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_models: 10,
            budgets: vec![50, 100, 200, 300],
            methods: SelectionMethod::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub folds: usize,
    /// Residual histogram bin width (m).
    pub histogram_bin: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            folds: 5,
            histogram_bin: 0.0005,
        }
    }
}

/// Experiment configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// `builtin:<name>` or a model file path (relative to the config file).
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Contact dataset for `select` and `calibrate`; defaults to
    /// `<output_dir>/dataset.jsonl`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub test_set: TestSetConfig,
    #[serde(default)]
    pub trajectories: TrajectoryConfig,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
}

fn default_model() -> String {
    "builtin:dlr_like".into()
}

impl ExperimentConfig {
    /// Defaults with an explicit seed.
    pub fn new(seed: u64) -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed,
            model: default_model(),
            output_dir: None,
            dataset: None,
            noise: NoiseModel::default(),
            solver: SolverOptions::default(),
            test_set: TestSetConfig::default(),
            trajectories: TrajectoryConfig::default(),
            perturbation: PerturbationConfig::default(),
            simulation: SimulationConfig::default(),
            sensitivity: SensitivityConfig::default(),
            selection: SelectionConfig::default(),
            study: StudyConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative model and dataset paths are resolved
    /// against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        if !cfg.model.starts_with("builtin:") {
            cfg.model = rebase(Path::new(&cfg.model)).to_string_lossy().into_owned();
        }
        cfg.dataset = cfg.dataset.as_deref().map(rebase);
        cfg.output_dir = cfg.output_dir.as_deref().map(rebase);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.noise.validate()?;
        if let Some(s) = self.simulation.trigger_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("trigger_sigma must be non-negative".into());
            }
        }
        if !(self.perturbation.rot_deg >= 0.0 && self.perturbation.trans >= 0.0) {
            return bad("perturbation bounds must be non-negative".into());
        }
        if self.test_set.size == 0 {
            return bad("test_set.size must be positive".into());
        }
        if self.trajectories.per_pair == 0 {
            return bad("trajectories.per_pair must be positive".into());
        }
        if self.study.budgets.iter().any(|b| *b == 0) {
            return bad("study budgets must be positive".into());
        }
        if self.calibration.folds < 2 {
            return bad("calibration.folds must be at least 2".into());
        }
        if !self.model.starts_with("builtin:") && !Path::new(&self.model).exists() {
            return bad(format!("model file {} does not exist", self.model));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.output_dir().join("dataset.jsonl"))
    }

    pub fn load_model(&self) -> Result<HandModel> {
        HandModel::resolve(&self.model)
    }

    pub fn trigger_sigma(&self) -> f64 {
        self.simulation.trigger_sigma.unwrap_or(self.noise.contact)
    }
}

/// Report envelope: the config hash next to the payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

/// Writes reports into one directory.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
    pub config_hash: String,
    pub seed: u64,
}

impl OutputDir {
    pub fn create(cfg: &ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(OutputDir {
            root,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf> {
        let report = Report {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            body,
        };
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// CSV with a leading `# config_hash=...` comment line.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        let mut text = format!("# config_hash={}\n", self.config_hash);
        text.push_str(&String::from_utf8(body).expect("csv is utf-8"));
        self.write_text(name, &text)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Mean and max of a list of non-negative errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub max: f64,
    pub rms: f64,
    pub n: usize,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Self {
        let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        ErrorStats {
            mean: mean(&abs),
            max: max(&abs),
            rms: mean(&abs.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt(),
            n: abs.len(),
        }
    }
}

/// The uniform cartesian test set of the config's model.
pub fn test_set(cfg: &ExperimentConfig, tree: &KinematicTree) -> Result<Vec<Configuration>> {
    uniform_task_test_set(
        tree,
        cfg.test_set.size,
        &cfg.test_set.grid,
        derive_seed(cfg.seed, &[TAG_TEST_SET]),
    )
}

/// Summary of a loaded model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheck {
    pub name: String,
    pub n_links: usize,
    pub n_active_joints: usize,
    pub end_effectors: Vec<String>,
    pub n_calibration_parameters: usize,
    pub n_joint_offset_parameters: usize,
    pub tips_at_zero: Vec<[f64; 3]>,
    /// Shared workspace cells per finger pair.
    pub shared_cells: Vec<(BodyPair, usize)>,
}

pub fn run_model_check(cfg: &ExperimentConfig) -> Result<ModelCheck> {
    let model = cfg.load_model()?;
    let tree = &model.tree;
    let q0 = Configuration::zeros(tree.n_active_joints());
    let mut tips = Vec::new();
    for e in 0..tree.n_end_effectors() {
        let p = tree.tip_frame(&q0, e)?.position;
        tips.push([p.x, p.y, p.z]);
    }
    let opts = &cfg.trajectories.search;
    let shared_cells = BodyPair::all(tree.n_end_effectors())
        .into_iter()
        .map(|p| {
            crate::sampling::shared_workspace(tree, p, opts.workspace_samples, opts.cell_size, cfg.seed)
                .map(|s| (p, s.cells.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelCheck {
        name: model.name.clone(),
        n_links: tree.links().len(),
        n_active_joints: tree.n_active_joints(),
        end_effectors: tree.end_effectors().iter().map(|e| e.name.to_string()).collect(),
        n_calibration_parameters: tree.calibration_layout().len(),
        n_joint_offset_parameters: tree.joint_offset_layout().len(),
        tips_at_zero: tips,
        shared_cells,
    })
}

/// Spectrum of one measurement kind in one mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub n_params: usize,
    pub identifiable: usize,
    pub kernel_dim: usize,
    pub eigenvalues: Vec<f64>,
}

impl From<&SensitivityReport> for SpectrumSummary {
    fn from(r: &SensitivityReport) -> Self {
        SpectrumSummary {
            n_params: r.n_params(),
            identifiable: r.identifiable(),
            kernel_dim: r.kernel_dim,
            eigenvalues: r.eigenvalues.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSensitivity {
    pub mode: SensitivityMode,
    pub label: String,
    pub contact: SpectrumSummary,
    pub task: SpectrumSummary,
    /// Contact kernel contained in the task kernel.
    pub inclusion: KernelInclusion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSensitivity {
    pub model: String,
    pub modes: Vec<ModeSensitivity>,
}

impl ModelSensitivity {
    pub fn mode(&self, label: &str) -> Option<&ModeSensitivity> {
        self.modes.iter().find(|m| m.label == label)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityStudy {
    pub models: Vec<ModelSensitivity>,
}

/// Contact probes come from random configurations, task probes from the
/// uniform test set; both use `configs_per_pair` configurations.
pub fn sensitivity_for_model(cfg: &ExperimentConfig, model_spec: &str, index: usize) -> Result<ModelSensitivity> {
    let model = HandModel::resolve(model_spec)?;
    let tree = &model.tree;
    let s = &cfg.sensitivity;
    let mut rng = substream(cfg.seed, &[TAG_PROBES, index as u64]);
    let contact_q: Vec<Configuration> = (0..s.configs_per_pair)
        .map(|_| random_configuration(tree, &mut rng))
        .collect();
    let task_q = uniform_task_test_set(
        tree,
        s.configs_per_pair,
        &cfg.test_set.grid,
        derive_seed(cfg.seed, &[TAG_TEST_SET, index as u64]),
    )?;
    let layout = tree.calibration_layout();
    let options = SensitivityOptions {
        threshold: s.threshold,
        length_scale: s.length_scale,
    };
    let modes = [
        SensitivityMode::SinglePair {
            k: s.single_pair[0],
            l: s.single_pair[1],
        },
        SensitivityMode::ThreeFingers {
            fingers: s.three_fingers,
        },
        SensitivityMode::AllPairs,
    ];
    let mut out = Vec::new();
    for mode in modes {
        let c = sensitivity(tree, &layout, &contact_q, MeasurementKind::Contact, mode, None, &options)?;
        let t = sensitivity(tree, &layout, &task_q, MeasurementKind::Task, mode, None, &options)?;
        let inclusion = kernel_included(&c, &t, s.inclusion_tolerance)?;
        out.push(ModeSensitivity {
            mode,
            label: mode.label(),
            contact: (&c).into(),
            task: (&t).into(),
            inclusion,
        });
    }
    Ok(ModelSensitivity {
        model: model.name,
        modes: out,
    })
}

pub fn run_sensitivity(cfg: &ExperimentConfig) -> Result<SensitivityStudy> {
    let models = cfg
        .sensitivity
        .models
        .par_iter()
        .enumerate()
        .map(|(i, m)| sensitivity_for_model(cfg, m, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityStudy { models })
}

pub fn write_sensitivity(out: &OutputDir, study: &SensitivityStudy) -> Result<()> {
    out.write_json("sensitivity.json", study)?;
    let mut rows = Vec::new();
    for m in &study.models {
        for mode in &m.modes {
            for (kind, spec) in [("contact", &mode.contact), ("task", &mode.task)] {
                for (i, v) in spec.eigenvalues.iter().enumerate() {
                    rows.push(vec![
                        m.model.clone(),
                        mode.label.clone(),
                        kind.into(),
                        i.to_string(),
                        format!("{v:e}"),
                    ]);
                }
            }
        }
    }
    out.write_csv("sensitivity_spectra.csv", &["model", "mode", "kind", "index", "eigenvalue"], &rows)?;
    Ok(())
}

/// Search drives for every finger pair on the nominal model.
pub fn generate_all_trajectories(cfg: &ExperimentConfig, model: &HandModel) -> Result<Vec<SearchTrajectory>> {
    let pairs = BodyPair::all(model.tree.n_end_effectors());
    let per = pairs
        .par_iter()
        .map(|p| {
            generate_search_trajectories(
                model,
                *p,
                cfg.trajectories.per_pair,
                &cfg.trajectories.search,
                derive_seed(cfg.seed, &[TAG_TRAJ, p.k as u64, p.l as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Ground truth `index` drawn from the perturbation spec.
pub fn ground_truth(cfg: &ExperimentConfig, tree: &KinematicTree, index: u64) -> Result<KinematicTree> {
    perturb(
        tree,
        &tree.calibration_layout(),
        cfg.perturbation.rot_deg.to_radians(),
        cfg.perturbation.trans,
        &mut substream(cfg.seed, &[TAG_TRUTH, index]),
    )
}

/// Outcome of running every drive on one ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub ground_truth: u64,
    pub trigger_sigma: f64,
    pub drives: usize,
    pub contacts: usize,
    /// Per pair: (pair, drives, contacts).
    pub per_pair: Vec<(BodyPair, usize, usize)>,
    /// Nominal-model signed distance at the measured contacts.
    pub nominal_contact_error: ErrorStats,
}

/// Executes the drives on ground truth `index`; failed drives are dropped.
pub fn simulate_dataset(
    cfg: &ExperimentConfig,
    nominal: &KinematicTree,
    truth: &KinematicTree,
    index: u64,
    trajectories: &[SearchTrajectory],
) -> Result<(Vec<Measurement>, SimulationSummary)> {
    let sigma = cfg.trigger_sigma();
    let events = trajectories
        .par_iter()
        .enumerate()
        .map(|(j, t)| {
            let seed = derive_seed(cfg.seed, &[TAG_TRIGGER, index, j as u64]);
            Ok(simulate_contact(t, truth, sigma, seed)?.map(|e| e.to_measurement(t, seed)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_pair: Vec<(BodyPair, usize, usize)> = BodyPair::all(nominal.n_end_effectors())
        .into_iter()
        .map(|p| (p, 0, 0))
        .collect();
    for (t, e) in trajectories.iter().zip(&events) {
        if let Some(entry) = per_pair.iter_mut().find(|(p, _, _)| *p == t.pair) {
            entry.1 += 1;
            entry.2 += usize::from(e.is_some());
        }
    }
    let dataset: Vec<Measurement> = events.into_iter().flatten().collect();
    let nominal_err = dataset
        .iter()
        .map(|m| h_contact(nominal, &m.q, m.pair.expect("contact measurement")))
        .collect::<Result<Vec<_>>>()?;
    let summary = SimulationSummary {
        ground_truth: index,
        trigger_sigma: sigma,
        drives: trajectories.len(),
        contacts: dataset.len(),
        per_pair,
        nominal_contact_error: ErrorStats::of(&nominal_err),
    };
    Ok((dataset, summary))
}

/// Candidate pool over a contact dataset, Jacobians on the nominal model.
pub fn contact_pool(
    cfg: &ExperimentConfig,
    nominal: &KinematicTree,
    dataset: &[Measurement],
    test_set: &[Configuration],
) -> Result<CandidatePool> {
    let layout = nominal.calibration_layout();
    let prior = nominal.parameters(&layout)?;
    CandidatePool::from_measurements(
        nominal,
        &layout,
        dataset,
        test_set,
        &cfg.noise,
        prior.prior_sigma().clone(),
        None,
    )
}

fn random_seed(cfg: &ExperimentConfig, model: u64, budget: usize) -> u64 {
    derive_seed(cfg.seed, &[TAG_RANDOM, model, budget as u64])
}

/// Runs the configured selection on a dataset.
pub fn run_selection(cfg: &ExperimentConfig, dataset: &[Measurement]) -> Result<SelectionResult> {
    let model = cfg.load_model()?;
    let ts = test_set(cfg, &model.tree)?;
    let pool = contact_pool(cfg, &model.tree, dataset, &ts)?;
    let s = &cfg.selection;
    if s.budget > pool.len() {
        return Err(Error::Config(format!(
            "selection budget {} exceeds pool size {}",
            s.budget,
            pool.len()
        )));
    }
    select(&pool, s.method, s.budget, random_seed(cfg, 0, s.budget), &s.detmax)
}

/// Calibrated task error of one (method, budget) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetOutcome {
    pub method: SelectionMethod,
    pub budget: usize,
    pub log_objective: f64,
    pub task_error: ErrorStats,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub index: u64,
    pub pool_size: usize,
    pub simulation: Option<SimulationSummary>,
    pub uncalibrated: Option<ErrorStats>,
    pub outcomes: Vec<BudgetOutcome>,
    /// Set when this ground truth failed; the study continues.
    pub error: Option<String>,
}

/// Mean over ground truths of the mean and max task errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: SelectionMethod,
    pub budget: usize,
    pub mean_error: f64,
    pub max_error: f64,
    pub models: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub n_models: usize,
    pub failed_models: usize,
    pub mean_uncalibrated_error: f64,
    pub curves: Vec<CurvePoint>,
    pub models: Vec<ModelOutcome>,
}

impl StudyReport {
    pub fn point(&self, method: SelectionMethod, budget: usize) -> Option<&CurvePoint> {
        self.curves.iter().find(|c| c.method == method && c.budget == budget)
    }
}

fn study_model(
    cfg: &ExperimentConfig,
    model: &HandModel,
    trajectories: &[SearchTrajectory],
    ts: &[Configuration],
    index: u64,
) -> Result<ModelOutcome> {
    let nominal = &model.tree;
    let truth = ground_truth(cfg, nominal, index)?;
    let (dataset, summary) = simulate_dataset(cfg, nominal, &truth, index, trajectories)?;
    let pool = contact_pool(cfg, nominal, &dataset, ts)?;
    let max_budget = cfg.study.budgets.iter().copied().max().unwrap_or(0);
    if max_budget > pool.len() {
        return Err(Error::Config(format!(
            "budget {max_budget} exceeds pool size {} for ground truth {index}",
            pool.len()
        )));
    }
    let layout = nominal.calibration_layout();
    let prior = nominal.parameters(&layout)?;
    let uncal = ErrorStats::of(&task_errors(nominal, &truth, ts)?);
    // Greedy designs are nested, so one run covers every budget.
    let greedy = if cfg.study.methods.contains(&SelectionMethod::Greedy) {
        Some(select_greedy(&pool, max_budget)?)
    } else {
        None
    };
    let mut outcomes = Vec::new();
    for &method in &cfg.study.methods {
        for &budget in &cfg.study.budgets {
            let (selected, log_objective) = match (&greedy, method) {
                (Some(g), SelectionMethod::Greedy) => (g.selected[..budget].to_vec(), g.objective_trace[budget]),
                _ => {
                    let r = select(&pool, method, budget, random_seed(cfg, index, budget), &cfg.selection.detmax)?;
                    (r.selected, r.log_objective)
                }
            };
            let subset: Vec<Measurement> = selected.iter().map(|&i| dataset[i].clone()).collect();
            let r = calibrate(&subset, nominal, &prior, &cfg.noise, &cfg.solver, None)?;
            let calibrated = nominal.with_parameters(&r.theta_star)?;
            outcomes.push(BudgetOutcome {
                method,
                budget,
                log_objective,
                task_error: ErrorStats::of(&task_errors(&calibrated, &truth, ts)?),
                converged: r.converged,
                iterations: r.iterations,
            });
        }
    }
    Ok(ModelOutcome {
        index,
        pool_size: pool.len(),
        simulation: Some(summary),
        uncalibrated: Some(uncal),
        outcomes,
        error: None,
    })
}

/// Perturbed ground truths, simulated contact pools, selection at every
/// budget, calibration and task-error evaluation on the uniform test set.
///
/// Per-model results are written to `models/` under `out` as soon as they
/// finish, so a later failure leaves them on disk.
pub fn run_simulation_study(cfg: &ExperimentConfig, out: Option<&OutputDir>) -> Result<StudyReport> {
    let model = cfg.load_model()?;
    let ts = test_set(cfg, &model.tree)?;
    let trajectories = generate_all_trajectories(cfg, &model)?;
    let models: Vec<ModelOutcome> = (0..cfg.study.n_models as u64)
        .into_par_iter()
        .map(|i| {
            let outcome = study_model(cfg, &model, &trajectories, &ts, i).unwrap_or_else(|e| ModelOutcome {
                index: i,
                pool_size: 0,
                simulation: None,
                uncalibrated: None,
                outcomes: Vec::new(),
                error: Some(e.to_string()),
            });
            if let Some(out) = out {
                out.write_json(&format!("models/model_{i:03}.json"), &outcome)?;
            }
            Ok(outcome)
        })
        .collect::<Result<Vec<_>>>()?;
    let ok: Vec<&ModelOutcome> = models.iter().filter(|m| m.error.is_none()).collect();
    let mut curves = Vec::new();
    for &method in &cfg.study.methods {
        for &budget in &cfg.study.budgets {
            let cells: Vec<&BudgetOutcome> = ok
                .iter()
                .flat_map(|m| m.outcomes.iter())
                .filter(|o| o.method == method && o.budget == budget)
                .collect();
            curves.push(CurvePoint {
                method,
                budget,
                mean_error: mean(&cells.iter().map(|c| c.task_error.mean).collect::<Vec<_>>()),
                max_error: mean(&cells.iter().map(|c| c.task_error.max).collect::<Vec<_>>()),
                models: cells.len(),
            });
        }
    }
    Ok(StudyReport {
        n_models: models.len(),
        failed_models: models.len() - ok.len(),
        mean_uncalibrated_error: mean(&ok.iter().filter_map(|m| m.uncalibrated.map(|u| u.mean)).collect::<Vec<_>>()),
        curves,
        models,
    })
}

pub fn write_study(out: &OutputDir, report: &StudyReport) -> Result<()> {
    out.write_json("study.json", report)?;
    let rows: Vec<Vec<String>> = report
        .curves
        .iter()
        .map(|c| {
            vec![
                c.method.name().into(),
                c.budget.to_string(),
                format!("{:e}", c.mean_error),
                format!("{:e}", c.max_error),
                c.models.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "study_curves.csv",
        &["method", "budget", "mean_task_error", "max_task_error", "models"],
        &rows,
    )?;
    let mut rows = Vec::new();
    for m in &report.models {
        for o in &m.outcomes {
            rows.push(vec![
                m.index.to_string(),
                o.method.name().into(),
                o.budget.to_string(),
                format!("{:e}", o.task_error.mean),
                format!("{:e}", o.task_error.max),
                format!("{:e}", o.log_objective),
            ]);
        }
    }
    out.write_csv(
        "study_models.csv",
        &["model", "method", "budget", "mean_task_error", "max_task_error", "log_od"],
        &rows,
    )?;
    Ok(())
}

/// Calibrated parameter subsets compared by cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationVariant {
    JointOffsets,
    FullDh,
}

impl CalibrationVariant {
    pub const ALL: [CalibrationVariant; 2] = [CalibrationVariant::JointOffsets, CalibrationVariant::FullDh];

    pub fn layout(self, tree: &KinematicTree) -> ParameterLayout {
        match self {
            CalibrationVariant::JointOffsets => tree.joint_offset_layout(),
            CalibrationVariant::FullDh => tree.calibration_layout(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CalibrationVariant::JointOffsets => "joint_offsets",
            CalibrationVariant::FullDh => "full_dh",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: CalibrationVariant,
    pub n_params: usize,
    /// Held-out contact residuals, one per dataset entry.
    pub held_out_residuals: Vec<f64>,
    pub held_out: ErrorStats,
    /// Propagated task standard deviation of the all-data calibration.
    pub task_std_mean: f64,
    pub task_std_max: f64,
    /// Task error against the ground truth, when known.
    pub task_error: Option<ErrorStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_measurements: usize,
    pub folds: usize,
    pub fold_of: Vec<usize>,
    pub uncalibrated_residuals: Vec<f64>,
    pub uncalibrated: ErrorStats,
    pub uncalibrated_task_error: Option<ErrorStats>,
    pub variants: Vec<VariantReport>,
}

impl CalibrationReport {
    pub fn variant(&self, v: CalibrationVariant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Shuffled fold index per dataset entry.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &[TAG_FOLDS]));
    let mut fold_of = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % folds;
    }
    fold_of
}

fn contact_residuals(tree: &KinematicTree, dataset: &[Measurement]) -> Result<Vec<f64>> {
    dataset
        .iter()
        .map(|m| {
            let pair = m.pair.ok_or_else(|| Error::Config("calibration datasets hold contact measurements".into()))?;
            Ok(m.y.first().copied().unwrap_or(0.0) - h_contact(tree, &m.q, pair)?)
        })
        .collect()
}

/// Cross-validated comparison of the calibration variants on a contact
/// dataset. `truth` adds task errors against a known ground truth.
pub fn run_calibration(
    cfg: &ExperimentConfig,
    dataset: &[Measurement],
    truth: Option<&KinematicTree>,
) -> Result<CalibrationReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = cfg.load_model()?;
    let nominal = &model.tree;
    let folds = cfg.calibration.folds;
    let fold_of = fold_assignment(dataset.len(), folds, cfg.seed);
    let ts = test_set(cfg, nominal)?;
    let uncalibrated_residuals = contact_residuals(nominal, dataset)?;
    let mut variants = Vec::new();
    for variant in CalibrationVariant::ALL {
        let layout = variant.layout(nominal);
        let prior = nominal.parameters(&layout)?;
        let per_fold = (0..folds)
            .into_par_iter()
            .map(|f| {
                let train: Vec<Measurement> = dataset
                    .iter()
                    .zip(&fold_of)
                    .filter(|(_, g)| **g != f)
                    .map(|(m, _)| m.clone())
                    .collect();
                let r = calibrate(&train, nominal, &prior, &cfg.noise, &cfg.solver, None)?;
                nominal.with_parameters(&r.theta_star)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut held_out = vec![0.0; dataset.len()];
        for (i, m) in dataset.iter().enumerate() {
            held_out[i] = contact_residuals(&per_fold[fold_of[i]], std::slice::from_ref(m))?[0];
        }
        let full = calibrate(dataset, nominal, &prior, &cfg.noise, &cfg.solver, None)?;
        let calibrated = nominal.with_parameters(&full.theta_star)?;
        let prop = propagate_to_task(&full.parameter_covariance, &calibrated, &layout, &ts)?;
        let task_error = truth
            .map(|t| task_errors(&calibrated, t, &ts).map(|e| ErrorStats::of(&e)))
            .transpose()?;
        variants.push(VariantReport {
            variant,
            n_params: layout.len(),
            held_out: ErrorStats::of(&held_out),
            held_out_residuals: held_out,
            task_std_mean: prop.mean,
            task_std_max: prop.max,
            task_error,
        });
    }
    Ok(CalibrationReport {
        n_measurements: dataset.len(),
        folds,
        fold_of,
        uncalibrated: ErrorStats::of(&uncalibrated_residuals),
        uncalibrated_residuals,
        uncalibrated_task_error: truth
            .map(|t| task_errors(nominal, t, &ts).map(|e| ErrorStats::of(&e)))
            .transpose()?,
        variants,
    })
}

/// Counts of `|r|` per bin of width `bin`.
pub fn histogram(values: &[f64], bin: f64, n_bins: usize) -> Vec<usize> {
    let mut h = vec![0; n_bins];
    for v in values {
        let i = ((v.abs() / bin).floor() as usize).min(n_bins - 1);
        h[i] += 1;
    }
    h
}

pub fn write_calibration(out: &OutputDir, cfg: &ExperimentConfig, report: &CalibrationReport, dataset: &[Measurement]) -> Result<()> {
    out.write_json("calibration.json", report)?;
    let bin = cfg.calibration.histogram_bin;
    let top = report
        .variants
        .iter()
        .map(|v| v.held_out.max)
        .fold(report.uncalibrated.max, f64::max);
    let n_bins = ((top / bin).floor() as usize + 1).max(1);
    let mut series = vec![("uncalibrated", histogram(&report.uncalibrated_residuals, bin, n_bins))];
    for v in &report.variants {
        series.push((v.variant.name(), histogram(&v.held_out_residuals, bin, n_bins)));
    }
    let mut rows = Vec::new();
    for (name, h) in &series {
        for (i, c) in h.iter().enumerate() {
            rows.push(vec![name.to_string(), format!("{:e}", i as f64 * bin), c.to_string()]);
        }
    }
    out.write_csv("residual_histogram.csv", &["series", "bin_start", "count"], &rows)?;
    let mut rows = Vec::new();
    for (i, m) in dataset.iter().enumerate() {
        let p = m.pair.unwrap_or(BodyPair { k: 0, l: 0 });
        let mut row = vec![
            i.to_string(),
            format!("{}-{}", p.k, p.l),
            report.fold_of[i].to_string(),
            format!("{:e}", report.uncalibrated_residuals[i]),
        ];
        row.extend(report.variants.iter().map(|v| format!("{:e}", v.held_out_residuals[i])));
        rows.push(row);
    }
    let mut header = vec!["index", "pair", "fold", "uncalibrated"];
    header.extend(report.variants.iter().map(|v| v.variant.name()));
    out.write_csv("residual_scatter.csv", &header, &rows)?;
    Ok(())
}

/// Plain-text digest of whichever reports exist in `out`.
pub fn summarize_outputs(out: &OutputDir) -> Result<String> {
    let read = |name: &str| -> Result<Option<serde_json::Value>> {
        let path = out.path(name);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    };
    let mm = |v: &serde_json::Value| v.as_f64().map(|x| format!("{:.3} mm", x * 1e3)).unwrap_or_default();
    let mut s = format!("config_hash {}\n", out.config_hash);
    if let Some(v) = read("sensitivity.json")? {
        s.push_str("\nsensitivity (identifiable / parameters)\n");
        for m in v["models"].as_array().into_iter().flatten() {
            for mode in m["modes"].as_array().into_iter().flatten() {
                s.push_str(&format!(
                    "  {:<10} {:<16} contact {}/{}  task {}/{}  inclusion {}\n",
                    m["model"].as_str().unwrap_or(""),
                    mode["label"].as_str().unwrap_or(""),
                    mode["contact"]["identifiable"],
                    mode["contact"]["n_params"],
                    mode["task"]["identifiable"],
                    mode["task"]["n_params"],
                    mode["inclusion"]["included"],
                ));
            }
        }
    }
    if let Some(v) = read("study.json")? {
        s.push_str(&format!(
            "\nstudy: {} ground truths ({} failed), uncalibrated mean task error {}\n",
            v["n_models"],
            v["failed_models"],
            mm(&v["mean_uncalibrated_error"])
        ));
        for c in v["curves"].as_array().into_iter().flatten() {
            s.push_str(&format!(
                "  {:<7} budget {:>4}  mean {}  max {}\n",
                c["method"].as_str().unwrap_or(""),
                c["budget"],
                mm(&c["mean_error"]),
                mm(&c["max_error"])
            ));
        }
    }
    if let Some(v) = read("calibration.json")? {
        s.push_str(&format!(
            "\ncalibration: {} contacts, {} folds\n  uncalibrated   max {}  mean {}\n",
            v["n_measurements"],
            v["folds"],
            mm(&v["uncalibrated"]["max"]),
            mm(&v["uncalibrated"]["mean"])
        ));
        for r in v["variants"].as_array().into_iter().flatten() {
            s.push_str(&format!(
                "  {:<14} max {}  mean {}\n",
                r["variant"].as_str().unwrap_or(""),
                mm(&r["held_out"]["max"]),
                mm(&r["held_out"]["mean"])
            ));
        }
    }
    Ok(s)
}

/// Parameter values of a tree on its calibration layout.
pub fn parameter_values(tree: &KinematicTree) -> Result<DVector<f64>> {
    Ok(tree.parameters(&tree.calibration_layout())?.values().clone())
}
