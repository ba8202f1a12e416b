//! Workspace sampling, search trajectories and simulated contact events.
//!
//! Contacts are simulated instead of detected: a search drive moves one
//! finger of a pair along a straight joint-space line and the contact fires
//! where the ground-truth signed distance first reaches a drawn trigger
//! offset `eps ~ N(0, sigma_m)`. The recorded measurement is `y = 0`, so
//! `eps` turns into residual noise.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{capsule_signed_distance, Capsule};
use crate::kinematics::{Configuration, JointKind, KinematicTree};
use crate::measurement::{contact_details, BodyPair, Measurement, MeasurementMeta, PARALLEL_SIN};
use crate::model::HandModel;
use crate::params::ParameterLayout;
use crate::rng::{substream, StreamRng};

/// Configuration drawn uniformly inside the joint limits.
pub fn random_configuration<R: Rng + ?Sized>(tree: &KinematicTree, rng: &mut R) -> Configuration {
    Configuration(
        tree.joint_limits()
            .iter()
            .map(|[lo, hi]| rng.random_range(*lo..=*hi))
            .collect(),
    )
}

/// Joint values of one finger drawn inside its limits.
pub fn random_finger_values<R: Rng + ?Sized>(tree: &KinematicTree, finger: usize, rng: &mut R) -> Result<Vec<f64>> {
    let limits = tree.joint_limits();
    Ok(tree
        .branch_joints(finger)?
        .iter()
        .map(|&j| rng.random_range(limits[j][0]..=limits[j][1]))
        .collect())
}

/// Writes a finger's joint values into a full-hand configuration.
pub fn set_finger(tree: &KinematicTree, q: &mut Configuration, finger: usize, values: &[f64]) -> Result<()> {
    let joints = tree.branch_joints(finger)?;
    if joints.len() != values.len() {
        return Err(Error::DimensionMismatch {
            what: "finger joint values",
            expected: joints.len(),
            got: values.len(),
        });
    }
    for (j, v) in joints.iter().zip(values) {
        q.0[*j] = *v;
    }
    Ok(())
}

pub type CellKey = (i64, i64, i64);

fn cell_of(p: &Vector3<f64>, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceSample {
    pub finger: usize,
    /// The finger's own joint values, in branch order.
    pub q: Vec<f64>,
    pub tip: Vector3<f64>,
}

/// Tip positions of one finger binned into cubic cells.
#[derive(Debug, Clone)]
pub struct WorkspaceGrid {
    pub cell_size: f64,
    pub finger: usize,
    pub cells: BTreeMap<CellKey, Vec<WorkspaceSample>>,
}

impl WorkspaceGrid {
    /// Bins the tips of `n_samples` random finger configurations.
    pub fn build<R: Rng + ?Sized>(
        tree: &KinematicTree,
        finger: usize,
        n_samples: usize,
        cell_size: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::Config("cell size must be positive".into()));
        }
        let mut q = Configuration::zeros(tree.n_active_joints());
        let mut cells: BTreeMap<CellKey, Vec<WorkspaceSample>> = BTreeMap::new();
        for _ in 0..n_samples {
            let v = random_finger_values(tree, finger, rng)?;
            set_finger(tree, &mut q, finger, &v)?;
            let tip = tree.tip_frame(&q, finger)?.position;
            cells.entry(cell_of(&tip, cell_size)).or_default().push(WorkspaceSample { finger, q: v, tip });
        }
        Ok(WorkspaceGrid {
            cell_size,
            finger,
            cells,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn keys(&self) -> BTreeSet<CellKey> {
        self.cells.keys().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOptions {
    pub cell_size: f64,
    pub samples_per_finger: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            cell_size: 0.005,
            samples_per_finger: 20_000,
        }
    }
}

/// `n` full-hand configurations whose fingertips are spread uniformly over
/// each finger's occupied workspace cells.
///
/// Per finger, cells are drawn uniformly (with replacement) and one stored
/// configuration is drawn from each drawn cell.
pub fn uniform_task_test_set(
    tree: &KinematicTree,
    n: usize,
    grid: &GridOptions,
    seed: u64,
) -> Result<Vec<Configuration>> {
    if n == 0 {
        return Err(Error::Config("test set size must be positive".into()));
    }
    let n_ee = tree.n_end_effectors();
    let mut out = vec![Configuration::zeros(tree.n_active_joints()); n];
    for f in 0..n_ee {
        let mut rng = substream(seed, &[0x7e57, f as u64]);
        let g = WorkspaceGrid::build(tree, f, grid.samples_per_finger, grid.cell_size, &mut rng)?;
        if g.n_cells() < 2 {
            return Err(Error::DegenerateWorkspace(format!(
                "finger {f} occupies {} cell(s)",
                g.n_cells()
            )));
        }
        let cells: Vec<&Vec<WorkspaceSample>> = g.cells.values().collect();
        for q in out.iter_mut() {
            let cell = cells[rng.random_range(0..cells.len())];
            let s = cell.choose(&mut rng).expect("cells are non-empty");
            set_finger(tree, q, f, &s.q)?;
        }
    }
    Ok(out)
}

/// Samples of two fingers restricted to the cells both can reach.
#[derive(Debug, Clone)]
pub struct SharedWorkspace {
    pub pair: BodyPair,
    pub cell_size: f64,
    /// Shared cells with the samples of finger `k` and of finger `l`.
    pub cells: BTreeMap<CellKey, (Vec<WorkspaceSample>, Vec<WorkspaceSample>)>,
}

impl SharedWorkspace {
    pub fn first(&self) -> impl Iterator<Item = &WorkspaceSample> {
        self.cells.values().flat_map(|(a, _)| a.iter())
    }

    pub fn second(&self) -> impl Iterator<Item = &WorkspaceSample> {
        self.cells.values().flat_map(|(_, b)| b.iter())
    }
}

/// Intersects the two fingers' occupied cells.
pub fn shared_workspace(
    tree: &KinematicTree,
    pair: BodyPair,
    n_samples: usize,
    cell_size: f64,
    seed: u64,
) -> Result<SharedWorkspace> {
    BodyPair::new(pair.k, pair.l, tree.n_end_effectors())?;
    let ga = WorkspaceGrid::build(tree, pair.k, n_samples, cell_size, &mut substream(seed, &[0x5a, pair.k as u64]))?;
    let mut gb = WorkspaceGrid::build(tree, pair.l, n_samples, cell_size, &mut substream(seed, &[0x5b, pair.l as u64]))?;
    let mut cells = BTreeMap::new();
    for (key, a) in ga.cells {
        if let Some(b) = gb.cells.remove(&key) {
            cells.insert(key, (a, b));
        }
    }
    if cells.is_empty() {
        return Err(Error::EmptyIntersection(pair.k, pair.l));
    }
    Ok(SharedWorkspace { pair, cell_size, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrajectory {
    pub pair: BodyPair,
    pub moving_finger: usize,
    pub static_finger: usize,
    /// Far from contact under the nominal model.
    pub q_start: Configuration,
    /// In penetration under the nominal model.
    pub q_end: Configuration,
}

impl SearchTrajectory {
    pub fn at(&self, t: f64) -> Configuration {
        self.q_start.lerp(&self.q_end, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryOptions {
    /// Nominal signed distance required at the end configuration.
    pub collision_threshold: f64,
    /// Nominal signed distance required at the start configuration.
    pub start_margin: f64,
    /// Minimum signed distance between active and parked fingertips.
    pub clearance_margin: f64,
    /// Points checked along each path for clearance.
    pub clearance_steps: usize,
    pub cell_size: f64,
    pub workspace_samples: usize,
    /// Attempts per requested trajectory before giving up.
    pub attempts_per_trajectory: usize,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        TrajectoryOptions {
            collision_threshold: -0.002,
            start_margin: 0.015,
            clearance_margin: 0.005,
            clearance_steps: 32,
            cell_size: 0.01,
            workspace_samples: 20_000,
            attempts_per_trajectory: 400,
        }
    }
}

fn pair_distance(tree: &KinematicTree, q: &Configuration, a: usize, b: usize) -> Result<f64> {
    let ea = tree.end_effector(a)?;
    let eb = tree.end_effector(b)?;
    Ok(capsule_signed_distance(
        &ea.capsule,
        &tree.tip_frame(q, a)?,
        &eb.capsule,
        &tree.tip_frame(q, b)?,
    ))
}

/// Phalanx proxies (links after the first flexion) of a finger.
fn link_proxies(tree: &KinematicTree, q: &Configuration, finger: usize, radius: f64) -> Result<Vec<Capsule>> {
    let frames = tree.branch_frames(q, finger)?;
    let n = frames.len();
    let mut out = Vec::new();
    for w in frames[n.saturating_sub(3)..].windows(2) {
        out.push(Capsule {
            a: w[0].position,
            b: w[1].position,
            radius,
        });
    }
    Ok(out)
}

/// Clearance along `q(t)`: active tips keep `margin` from parked tips,
/// and active tips and phalanges stay out of the palm proxies.
pub fn path_is_clear(model: &HandModel, traj: &SearchTrajectory, margin: f64, steps: usize) -> Result<bool> {
    let tree = &model.tree;
    let n_ee = tree.n_end_effectors();
    let active = [traj.pair.k, traj.pair.l];
    let parked: Vec<usize> = (0..n_ee).filter(|f| !active.contains(f)).collect();
    let id = crate::kinematics::Frame::identity();
    for i in 0..=steps {
        let q = traj.at(i as f64 / steps.max(1) as f64);
        for &a in &active {
            for &p in &parked {
                if pair_distance(tree, &q, a, p)? <= margin {
                    return Ok(false);
                }
            }
            let tip = tree.end_effector(a)?;
            let frame = tree.tip_frame(&q, a)?;
            for palm in &model.palm {
                if capsule_signed_distance(&tip.capsule, &frame, palm, &id) < 0.0 {
                    return Ok(false);
                }
            }
            if a == traj.moving_finger {
                for proxy in link_proxies(tree, &q, a, model.proxy_radius)? {
                    for palm in &model.palm {
                        if capsule_signed_distance(&proxy, &id, palm, &id) < 0.0 {
                            return Ok(false);
                        }
                    }
                }
            }
        }
    }
    Ok(true)
}

/// Search drives for one pair, built on the nominal model.
///
/// Each drive pairs a configuration of finger `k` with a configuration of
/// finger `l` from the same or a neighbouring shared cell that penetrates
/// it, picks the moving finger with a fair coin, and draws a start for the
/// moving finger that is clear of contact. Other fingers stay parked.
pub fn generate_search_trajectories(
    model: &HandModel,
    pair: BodyPair,
    n_traj: usize,
    options: &TrajectoryOptions,
    seed: u64,
) -> Result<Vec<SearchTrajectory>> {
    let tree = &model.tree;
    let shared = shared_workspace(tree, pair, options.workspace_samples, options.cell_size, seed)?;
    let keys: Vec<CellKey> = shared.cells.keys().copied().collect();
    let mut rng = substream(seed, &[0x7a, pair.k as u64, pair.l as u64]);
    let base = model.parked_configuration(pair.k, pair.l);
    let mut out = Vec::with_capacity(n_traj);
    let mut attempts = 0;
    while out.len() < n_traj {
        if attempts >= options.attempts_per_trajectory * n_traj.max(1) {
            return Err(Error::TrajectoryGeneration(format!(
                "pair ({}, {}): {} of {n_traj} drives after {attempts} attempts",
                pair.k,
                pair.l,
                out.len()
            )));
        }
        attempts += 1;
        if let Some(t) = try_trajectory(model, &shared, &keys, &base, options, &mut rng)? {
            out.push(t);
        }
    }
    Ok(out)
}

fn try_trajectory(
    model: &HandModel,
    shared: &SharedWorkspace,
    keys: &[CellKey],
    base: &Configuration,
    options: &TrajectoryOptions,
    rng: &mut StreamRng,
) -> Result<Option<SearchTrajectory>> {
    let tree = &model.tree;
    let pair = shared.pair;
    let key = keys[rng.random_range(0..keys.len())];
    let a = shared.cells[&key].0.choose(rng).expect("non-empty cell");

    let mut q_end = base.clone();
    set_finger(tree, &mut q_end, pair.k, &a.q)?;
    let mut colliding = Vec::new();
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                let Some((_, bs)) = shared.cells.get(&(key.0 + dx, key.1 + dy, key.2 + dz)) else {
                    continue;
                };
                for b in bs {
                    let mut q = q_end.clone();
                    set_finger(tree, &mut q, pair.l, &b.q)?;
                    if pair_distance(tree, &q, pair.k, pair.l)? < options.collision_threshold {
                        colliding.push(b);
                    }
                }
            }
        }
    }
    let Some(b) = colliding.choose(rng) else {
        return Ok(None);
    };
    set_finger(tree, &mut q_end, pair.l, &b.q)?;

    let moving_is_k = rng.random_bool(0.5);
    let (moving, fixed) = if moving_is_k { (pair.k, pair.l) } else { (pair.l, pair.k) };
    let mut q_start = q_end.clone();
    let start = random_finger_values(tree, moving, rng)?;
    set_finger(tree, &mut q_start, moving, &start)?;
    if pair_distance(tree, &q_start, pair.k, pair.l)? <= options.start_margin {
        return Ok(None);
    }
    let traj = SearchTrajectory {
        pair,
        moving_finger: moving,
        static_finger: fixed,
        q_start,
        q_end,
    };
    if !path_is_clear(model, &traj, options.clearance_margin, options.clearance_steps)? {
        return Ok(None);
    }
    Ok(Some(traj))
}

/// A located contact on a search drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub q_contact: Configuration,
    pub pair: BodyPair,
    pub noise_realization: f64,
    /// Interpolation parameter of the contact along the drive.
    pub t: f64,
    pub moving_finger: usize,
    /// Ground-truth axis sine at contact below the non-smooth cut.
    pub near_parallel: bool,
}

impl ContactEvent {
    /// The recorded measurement (`y = 0`) with its provenance.
    pub fn to_measurement(&self, traj: &SearchTrajectory, seed: u64) -> Measurement {
        Measurement::contact(self.q_contact.clone(), self.pair).with_metadata(MeasurementMeta {
            q_start: Some(traj.q_start.clone()),
            q_end: Some(traj.q_end.clone()),
            moving_finger: Some(self.moving_finger),
            seed: Some(seed),
            noise_realization: Some(self.noise_realization),
            near_parallel: self.near_parallel,
        })
    }
}

/// Residual tolerance on `|d - eps|` at a returned contact.
pub const CONTACT_TOL: f64 = 1e-9;
/// Minimum advance in `t` while marching towards contact.
const MIN_ADVANCE: f64 = 1e-7;

/// Bound on `|d/dt d(q(t))|` for the drive: each joint's rate times the
/// largest lever from its axis to the moving capsule.
fn distance_rate_bound(tree: &KinematicTree, traj: &SearchTrajectory) -> Result<f64> {
    let ee = tree.end_effector(traj.moving_finger)?;
    let dq: Vec<f64> = traj
        .q_end
        .0
        .iter()
        .zip(&traj.q_start.0)
        .map(|(a, b)| a - b)
        .collect();
    let mut bound = 0.0;
    for &link in &ee.branch {
        let l = &tree.links()[link];
        let (rate, lever) = match l.dh.joint {
            JointKind::Revolute => (
                dq[tree.config_index(link).unwrap()].abs(),
                tree.lever_bound(traj.moving_finger, link),
            ),
            JointKind::Prismatic => (dq[tree.config_index(link).unwrap()].abs(), 1.0),
            JointKind::PassiveCoupled { source, ratio } => {
                let src = tree.config_index(source).map(|i| dq[i].abs()).unwrap_or(0.0);
                (ratio.abs() * src, tree.lever_bound(traj.moving_finger, link))
            }
            JointKind::Fixed => (0.0, 0.0),
        };
        bound += rate * lever;
    }
    Ok(bound * 1.05 + 1e-12)
}

/// Runs a drive on the ground-truth model with an explicit trigger offset.
///
/// Marches with safe steps `f(t) / L` (no crossing can be skipped), then
/// bisects the first bracket. Returns `None` when the drive starts in
/// contact or never reaches it.
pub fn simulate_contact_with_offset(
    traj: &SearchTrajectory,
    tree_gt: &KinematicTree,
    eps: f64,
) -> Result<Option<ContactEvent>> {
    let pair = traj.pair;
    let f = |t: f64| -> Result<f64> { Ok(pair_distance(tree_gt, &traj.at(t), pair.k, pair.l)? - eps) };
    let lip = distance_rate_bound(tree_gt, traj)?;
    let mut t = 0.0;
    let mut ft = f(t)?;
    if ft <= 0.0 {
        return Ok(None);
    }
    let (mut lo, mut hi) = loop {
        let step = (ft / lip).max(MIN_ADVANCE);
        let next = t + step;
        if next >= 1.0 {
            let f1 = f(1.0)?;
            if f1 <= 0.0 {
                break (t, 1.0);
            }
            return Ok(None);
        }
        let fn_ = f(next)?;
        if fn_ <= 0.0 {
            break (t, next);
        }
        t = next;
        ft = fn_;
    };
    let mut best = (hi, f(hi)?);
    for _ in 0..200 {
        if best.1.abs() < CONTACT_TOL || hi - lo < 1e-16 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm.abs() < best.1.abs() {
            best = (mid, fm);
        }
        if fm <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let q_contact = traj.at(best.0);
    let details = contact_details(tree_gt, &q_contact, pair)?;
    Ok(Some(ContactEvent {
        q_contact,
        pair,
        noise_realization: eps,
        t: best.0,
        moving_finger: traj.moving_finger,
        near_parallel: details.axis_sin < PARALLEL_SIN,
    }))
}

/// Draws `eps ~ N(0, sigma)` and runs the drive on the ground truth.
pub fn simulate_contact(
    traj: &SearchTrajectory,
    tree_gt: &KinematicTree,
    sigma: f64,
    seed: u64,
) -> Result<Option<ContactEvent>> {
    let eps = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        normal.sample(&mut substream(seed, &[0xe9]))
    } else {
        0.0
    };
    simulate_contact_with_offset(traj, tree_gt, eps)
}

/// Ground-truth hands: every layout field shifted uniformly by at most
/// `rot` (radians) or `trans` (metres).
pub fn perturb<R: Rng + ?Sized>(
    tree: &KinematicTree,
    layout: &ParameterLayout,
    rot: f64,
    trans: f64,
    rng: &mut R,
) -> Result<KinematicTree> {
    let base = tree.parameters(layout)?;
    let values: Vec<f64> = layout
        .slots()
        .iter()
        .zip(base.values().iter())
        .map(|(s, v)| {
            let a = if s.is_rotational() { rot } else { trans };
            if a > 0.0 {
                v + rng.random_range(-a..=a)
            } else {
                *v
            }
        })
        .collect();
    tree.with_values(layout, &values)
}

/// Mean Euclidean fingertip deviation between two hands over a test set.
pub fn mean_tip_deviation(a: &KinematicTree, b: &KinematicTree, test_set: &[Configuration]) -> Result<f64> {
    let n_ee = a.n_end_effectors();
    let total: f64 = test_set
        .par_iter()
        .map(|q| -> Result<f64> {
            let mut s = 0.0;
            for e in 0..n_ee {
                s += (a.tip_frame(q, e)?.position - b.tip_frame(q, e)?.position).norm();
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(total / (test_set.len() * n_ee).max(1) as f64)
}

/// Task-space error statistics between two hands over a test set: the
/// norm of each relative fingertip position error `(k = 2..N)`.
pub fn task_errors(a: &KinematicTree, b: &KinematicTree, test_set: &[Configuration]) -> Result<Vec<f64>> {
    let per: Vec<Vec<f64>> = test_set
        .par_iter()
        .map(|q| -> Result<Vec<f64>> {
            let ya = crate::measurement::h_task(a, q)?;
            let yb = crate::measurement::h_task(b, q)?;
            Ok((ya - yb).as_slice().chunks(3).map(|c| Vector3::new(c[0], c[1], c[2]).norm()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}
