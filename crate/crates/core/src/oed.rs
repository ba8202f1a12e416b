//! Task D-optimal selection of calibration measurements.
//!
//! The score of a subset `S` is
//!
//! ```text
//! O_D(S) = (1 / l) pdet( cov(Theta | S) * T ),   T = sum_s J_t^s^T J_t^s
//! ```
//!
//! with `l = N_Theta`. `pdet` is the product of the non-zero eigenvalues: the
//! task information `T` is rank deficient whenever the task function has a
//! kernel, and then the plain determinant is zero for every subset. On the
//! range of `T` (eigenvectors `U`, eigenvalues `L`) the score factors as
//! `det(L) * det(U^T cov U) / l`, which is what is evaluated, in log form.
//! When `T` has full rank this is the ordinary determinant.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::NoiseModel;
use crate::identifiability::sorted_eigen;
use crate::kinematics::{Configuration, KinematicTree};
use crate::measurement::{stacked_jacobian, MarkerModel, Measurement};
use crate::params::ParameterLayout;
use crate::rng::{seeded, substream};

/// Relative eigenvalue cut separating the range of `T` from its kernel.
pub const TEST_RANK_TOL: f64 = 1e-9;

/// Candidate measurements with their calibration Jacobians.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    jacobians: Vec<DMatrix<f64>>,
    sigmas: Vec<f64>,
    test_fim: DMatrix<f64>,
    prior_sigma: DVector<f64>,
    range: DMatrix<f64>,
    log_const: f64,
}

impl CandidatePool {
    /// `jacobians[s]` is `rows_s x N`, measured with standard deviation
    /// `sigmas[s]`; `test_fim` is the `N x N` task information.
    pub fn new(
        jacobians: Vec<DMatrix<f64>>,
        sigmas: Vec<f64>,
        test_fim: DMatrix<f64>,
        prior_sigma: DVector<f64>,
    ) -> Result<Self> {
        let n = prior_sigma.len();
        if test_fim.nrows() != n || test_fim.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "test information matrix",
                expected: n,
                got: test_fim.nrows(),
            });
        }
        if sigmas.len() != jacobians.len() {
            return Err(Error::DimensionMismatch {
                what: "candidate sigmas",
                expected: jacobians.len(),
                got: sigmas.len(),
            });
        }
        if let Some(j) = jacobians.iter().find(|j| j.ncols() != n) {
            return Err(Error::DimensionMismatch {
                what: "candidate jacobian columns",
                expected: n,
                got: j.ncols(),
            });
        }
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("candidate sigma must be positive".into()));
        }
        if prior_sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("selection needs finite positive prior sigmas".into()));
        }
        let (values, vectors) = sorted_eigen(&test_fim);
        let lmax = values.first().copied().unwrap_or(0.0);
        if !(lmax > 0.0) {
            return Err(Error::SingularInformation);
        }
        let r = values.iter().filter(|v| **v > TEST_RANK_TOL * lmax).count();
        let range = vectors.columns(0, r).into_owned();
        let log_const = -(n as f64).ln() + values[..r].iter().map(|v| v.ln()).sum::<f64>();
        Ok(CandidatePool {
            jacobians,
            sigmas,
            test_fim,
            prior_sigma,
            range,
            log_const,
        })
    }

    /// Builds a pool from measurement prototypes and a task test set.
    pub fn from_measurements(
        tree: &KinematicTree,
        layout: &ParameterLayout,
        candidates: &[Measurement],
        test_set: &[Configuration],
        noise: &NoiseModel,
        prior_sigma: DVector<f64>,
        markers: Option<&MarkerModel>,
    ) -> Result<Self> {
        let jacobians = candidates
            .par_iter()
            .map(|m| stacked_jacobian(tree, layout, std::slice::from_ref(m), markers))
            .collect::<Result<Vec<_>>>()?;
        let sigmas = candidates.iter().map(|m| noise.sigma(m.kind)).collect();
        let test_fim = task_information(tree, layout, test_set)?;
        Self::new(jacobians, sigmas, test_fim, prior_sigma)
    }

    pub fn len(&self) -> usize {
        self.jacobians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jacobians.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.prior_sigma.len()
    }

    pub fn jacobian(&self, s: usize) -> &DMatrix<f64> {
        &self.jacobians[s]
    }

    pub fn test_fim(&self) -> &DMatrix<f64> {
        &self.test_fim
    }

    /// Rank of the task information used by the score.
    pub fn test_rank(&self) -> usize {
        self.range.ncols()
    }

    /// Information matrix `sum_S J^T J / sigma^2 + diag(sigma_p^-2)`.
    pub fn information(&self, subset: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.n_params();
        let mut a = DMatrix::from_diagonal(&self.prior_sigma.map(|s| 1.0 / (s * s)));
        for &s in subset {
            let j = self.jacobians.get(s).ok_or(Error::DimensionMismatch {
                what: "candidate index",
                expected: self.len(),
                got: s,
            })?;
            a += j.transpose() * j / (self.sigmas[s] * self.sigmas[s]);
        }
        debug_assert_eq!(a.nrows(), n);
        Ok(a)
    }
}

/// `sum_s J_t^s^T J_t^s` over full-hand task measurements.
pub fn task_information(
    tree: &KinematicTree,
    layout: &ParameterLayout,
    test_set: &[Configuration],
) -> Result<DMatrix<f64>> {
    let dim = 3 * tree.n_end_effectors().saturating_sub(1);
    let ms: Vec<Measurement> = test_set
        .iter()
        .map(|q| Measurement::task(q.clone(), None, vec![0.0; dim]))
        .collect();
    let j = stacked_jacobian(tree, layout, &ms, None)?;
    Ok(j.transpose() * j)
}

fn logdet_spd(m: &DMatrix<f64>) -> Option<f64> {
    let c = m.clone().cholesky()?;
    Some(c.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum())
}

/// `log O_D(subset)`, recomputed from scratch.
pub fn log_d_optimality(pool: &CandidatePool, subset: &[usize]) -> Result<f64> {
    let a = pool.information(subset)?;
    let chol = a.cholesky().ok_or(Error::SingularInformation)?;
    let x = chol.solve(&pool.range);
    let c = pool.range.transpose() * x;
    let c = (&c + c.transpose()) * 0.5;
    Ok(pool.log_const + logdet_spd(&c).ok_or(Error::SingularInformation)?)
}

/// `O_D(subset)`.
pub fn d_optimality(pool: &CandidatePool, subset: &[usize]) -> Result<f64> {
    Ok(log_d_optimality(pool, subset)?.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Random,
    Greedy,
    Detmax,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 3] = [SelectionMethod::Random, SelectionMethod::Greedy, SelectionMethod::Detmax];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Random => "random",
            SelectionMethod::Greedy => "greedy",
            SelectionMethod::Detmax => "detmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub selected: Vec<usize>,
    /// `log O_D` after each accepted change.
    pub objective_trace: Vec<f64>,
    pub log_objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetmaxOptions {
    /// Maximum number of accepted changes.
    pub max_sweeps: usize,
    /// Number of additions (removals) in one excursion.
    pub excursion_depth: usize,
    /// Depth up to which stalled excursions are lengthened.
    pub max_excursion_depth: usize,
    /// When excursions of depth `k` stall, also search every exchange of
    /// `k` selected for `k` unselected candidates, provided there are at
    /// most `exchange_cap` of them (single exchanges are always searched).
    pub exchange_search: bool,
    pub exchange_cap: usize,
    /// Minimum relative decrease of `O_D` for a change to count.
    pub relative_tolerance: f64,
    /// Extra runs from seeded random designs; the best design is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for DetmaxOptions {
    fn default() -> Self {
        DetmaxOptions {
            max_sweeps: 50,
            excursion_depth: 1,
            max_excursion_depth: 4,
            exchange_search: true,
            exchange_cap: 20_000,
            relative_tolerance: 1e-9,
            restarts: 0,
            seed: 0,
        }
    }
}

/// Incrementally updated design: inverse information and its task-range
/// projections.
#[derive(Clone)]
struct Design<'a> {
    pool: &'a CandidatePool,
    in_set: Vec<bool>,
    selected: Vec<usize>,
    m: DMatrix<f64>,
    g: DMatrix<f64>,
    log_od: f64,
}

impl<'a> Design<'a> {
    fn new(pool: &'a CandidatePool, subset: &[usize]) -> Result<Self> {
        let a = pool.information(subset)?;
        let m = a.try_inverse().ok_or(Error::SingularInformation)?;
        let mut d = Design {
            pool,
            in_set: vec![false; pool.len()],
            selected: Vec::new(),
            m: (&m + m.transpose()) * 0.5,
            g: DMatrix::zeros(0, 0),
            log_od: 0.0,
        };
        for &s in subset {
            d.in_set[s] = true;
            d.selected.push(s);
        }
        d.refresh()?;
        Ok(d)
    }

    fn refresh(&mut self) -> Result<()> {
        let mu = &self.m * &self.pool.range;
        let c = self.pool.range.transpose() * &mu;
        let c = (&c + c.transpose()) * 0.5;
        let chol = c.cholesky().ok_or(Error::SingularInformation)?;
        self.log_od = self.pool.log_const + chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
        let g = &mu * chol.solve(&mu.transpose());
        self.g = (&g + g.transpose()) * 0.5;
        Ok(())
    }

    fn inner(&self, s: usize, sign: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let j = &self.pool.jacobians[s];
        let jm = j * &self.m;
        let var = self.pool.sigmas[s] * self.pool.sigmas[s];
        let mut sm = &jm * j.transpose() * sign;
        for i in 0..sm.nrows() {
            sm[(i, i)] += var;
        }
        let k = j * &self.g * j.transpose();
        (jm, sm, k)
    }

    /// Change of `log O_D` when adding candidate `s`.
    fn add_gain(&self, s: usize) -> f64 {
        let (_, sm, k) = self.inner(s, 1.0);
        match (logdet_spd(&(&sm - &k)), logdet_spd(&sm)) {
            (Some(a), Some(b)) => a - b,
            _ => f64::INFINITY,
        }
    }

    /// Change of `log O_D` when removing selected candidate `s`.
    fn remove_gain(&self, s: usize) -> f64 {
        let (_, sr, k) = self.inner(s, -1.0);
        match (logdet_spd(&(&sr + &k)), logdet_spd(&sr)) {
            (Some(a), Some(b)) => a - b,
            _ => f64::INFINITY,
        }
    }

    fn update(&mut self, s: usize, sign: f64) -> Result<()> {
        let (jm, sm, _) = self.inner(s, sign);
        let chol = sm.cholesky().ok_or(Error::SingularInformation)?;
        let delta = jm.transpose() * chol.solve(&jm);
        self.m -= delta * sign;
        self.m = (&self.m + self.m.transpose()) * 0.5;
        self.refresh()
    }

    fn add(&mut self, s: usize) -> Result<()> {
        self.update(s, 1.0)?;
        self.in_set[s] = true;
        self.selected.push(s);
        Ok(())
    }

    fn remove(&mut self, s: usize) -> Result<()> {
        self.update(s, -1.0)?;
        self.in_set[s] = false;
        self.selected.retain(|&x| x != s);
        Ok(())
    }

    /// Lowest-gain candidate among `pred`; ties go to the lowest index.
    fn best<F, P>(&self, gain: F, pred: P) -> Option<(usize, f64)>
    where
        F: Fn(&Self, usize) -> f64 + Sync,
        P: Fn(usize) -> bool + Sync,
    {
        let scores: Vec<(usize, f64)> = (0..self.pool.len())
            .into_par_iter()
            .filter(|&s| pred(s))
            .map(|s| (s, gain(self, s)))
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (s, g) in scores {
            if best.is_none_or(|(_, b)| g < b) {
                best = Some((s, g));
            }
        }
        best
    }

    fn best_add(&self) -> Option<(usize, f64)> {
        let in_set = &self.in_set;
        self.best(|d, s| d.add_gain(s), |s| !in_set[s])
    }

    fn best_remove(&self) -> Option<(usize, f64)> {
        let in_set = &self.in_set;
        self.best(|d, s| d.remove_gain(s), |s| in_set[s])
    }
}

fn check_budget(pool: &CandidatePool, budget: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if budget > pool.len() {
        return Err(Error::BudgetTooLarge {
            budget,
            pool: pool.len(),
        });
    }
    Ok(())
}

fn greedy_design(pool: &CandidatePool, budget: usize) -> Result<(Design<'_>, Vec<f64>)> {
    check_budget(pool, budget)?;
    let mut d = Design::new(pool, &[])?;
    let mut trace = vec![d.log_od];
    for _ in 0..budget {
        let (s, _) = d.best_add().expect("budget within pool size");
        d.add(s)?;
        trace.push(d.log_od);
    }
    Ok((d, trace))
}

/// Adds, one at a time, the candidate that lowers `O_D` most.
pub fn select_greedy(pool: &CandidatePool, budget: usize) -> Result<SelectionResult> {
    let (d, trace) = greedy_design(pool, budget)?;
    Ok(SelectionResult {
        method: SelectionMethod::Greedy,
        log_objective: d.log_od,
        selected: d.selected,
        objective_trace: trace,
    })
}

fn excursion_up<'a>(d: &Design<'a>, depth: usize, budget: usize) -> Result<Design<'a>> {
    let mut up = d.clone();
    for _ in 0..depth.min(d.pool.len() - budget) {
        let (s, _) = up.best_add().expect("candidates left");
        up.add(s)?;
    }
    while up.selected.len() > budget {
        let (s, _) = up.best_remove().expect("non-empty design");
        up.remove(s)?;
    }
    Ok(up)
}

fn excursion_down<'a>(d: &Design<'a>, depth: usize, budget: usize) -> Result<Design<'a>> {
    let mut down = d.clone();
    for _ in 0..depth.min(budget) {
        let (s, _) = down.best_remove().expect("non-empty design");
        down.remove(s)?;
    }
    while down.selected.len() < budget {
        let (s, _) = down.best_add().expect("candidates left");
        down.add(s)?;
    }
    Ok(down)
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(items: &[usize], k: usize, from: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in from..items.len() {
            if items.len() - i < k - cur.len() {
                break;
            }
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    rec(items, k, 0, &mut cur, &mut out);
    out
}

fn n_choose(n: usize, k: usize) -> f64 {
    (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product()
}

/// Best `k`-exchange `(design after, log O_D)`, or `None` when the
/// neighbourhood exceeds `cap` designs.
fn best_exchange<'a>(d: &Design<'a>, k: usize, cap: usize) -> Result<Option<Design<'a>>> {
    let outside: Vec<usize> = (0..d.pool.len()).filter(|&s| !d.in_set[s]).collect();
    let mut inside = d.selected.clone();
    inside.sort_unstable();
    if k > inside.len() || k > outside.len() {
        return Ok(None);
    }
    if k > 1 && n_choose(inside.len(), k) * n_choose(outside.len(), k) > cap as f64 {
        return Ok(None);
    }
    let mut best: Option<(Vec<usize>, Vec<usize>, f64)> = None;
    for out in combinations(&inside, k) {
        let mut without = d.clone();
        for &s in &out {
            without.remove(s)?;
        }
        if k == 1 {
            let pred = |s: usize| !d.in_set[s];
            if let Some((inn, g)) = without.best(|w, s| w.add_gain(s), pred) {
                let val = without.log_od + g;
                if best.as_ref().is_none_or(|b| val < b.2) {
                    best = Some((out, vec![inn], val));
                }
            }
            continue;
        }
        for inn in combinations(&outside, k) {
            let mut with = without.clone();
            for &s in &inn {
                with.add(s)?;
            }
            if best.as_ref().is_none_or(|b| with.log_od < b.2) {
                best = Some((out.clone(), inn, with.log_od));
            }
        }
    }
    let Some((out, inn, _)) = best else {
        return Ok(None);
    };
    let mut next = d.clone();
    for s in out {
        next.remove(s)?;
    }
    for s in inn {
        next.add(s)?;
    }
    Ok(Some(next))
}

/// Exchange search started from the greedy design.
///
/// Each round tries an add-then-remove excursion and a remove-then-add
/// excursion of the current depth, then the best exchange of that depth. The first change lowering `O_D` by more than the
/// relative tolerance is accepted and the depth resets; when nothing
/// improves, the excursion depth grows until `max_excursion_depth`.
pub fn select_detmax(pool: &CandidatePool, budget: usize, options: &DetmaxOptions) -> Result<SelectionResult> {
    let (d, mut trace) = greedy_design(pool, budget)?;
    let mut best = refine(d, budget, options, &mut trace)?;
    for r in 0..options.restarts {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut substream(options.seed, &[r as u64]));
        idx.truncate(budget);
        let start = Design::new(pool, &idx)?;
        let mut scratch = Vec::new();
        let cand = refine(start, budget, options, &mut scratch)?;
        if cand.log_od < best.log_od - 1e-12 {
            best = cand;
            trace.push(best.log_od);
        }
    }

    let mut selected = best.selected.clone();
    selected.sort_unstable();
    let log_objective = log_d_optimality(pool, &selected)?;
    Ok(SelectionResult {
        method: SelectionMethod::Detmax,
        selected,
        objective_trace: trace,
        log_objective,
    })
}

fn refine<'a>(mut d: Design<'a>, budget: usize, options: &DetmaxOptions, trace: &mut Vec<f64>) -> Result<Design<'a>> {
    let pool = d.pool;
    let start_depth = options.excursion_depth.max(1);
    let max_depth = options.max_excursion_depth.max(start_depth);
    let tol = -(-options.relative_tolerance).ln_1p();
    let improves = |new: f64, old: f64| new < old - tol;

    let mut depth = start_depth;
    let mut accepted = 0;
    while accepted < options.max_sweeps && budget > 0 && budget < pool.len() {
        let cur = d.log_od;
        let up = excursion_up(&d, depth, budget)?;
        let next = if improves(up.log_od, cur) {
            Some(up)
        } else {
            let down = excursion_down(&d, depth, budget)?;
            if improves(down.log_od, cur) {
                Some(down)
            } else if options.exchange_search {
                best_exchange(&d, depth, options.exchange_cap)?.filter(|x| improves(x.log_od, cur))
            } else {
                None
            }
        };
        match next {
            Some(n) => {
                d = n;
                trace.push(d.log_od);
                accepted += 1;
                depth = start_depth;
            }
            None if depth < max_depth => depth += 1,
            None => break,
        }
    }
    Ok(d)
}

/// Seeded uniform subset, in draw order.
pub fn select_random(pool: &CandidatePool, budget: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(pool, budget)?;
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut seeded(seed));
    idx.truncate(budget);
    let mut d = Design::new(pool, &[])?;
    let mut trace = vec![d.log_od];
    for &s in &idx {
        d.add(s)?;
        trace.push(d.log_od);
    }
    Ok(SelectionResult {
        method: SelectionMethod::Random,
        selected: idx,
        log_objective: d.log_od,
        objective_trace: trace,
    })
}

/// Dispatches on `method`.
pub fn select(
    pool: &CandidatePool,
    method: SelectionMethod,
    budget: usize,
    seed: u64,
    detmax: &DetmaxOptions,
) -> Result<SelectionResult> {
    match method {
        SelectionMethod::Random => select_random(pool, budget, seed),
        SelectionMethod::Greedy => select_greedy(pool, budget),
        SelectionMethod::Detmax => select_detmax(pool, budget, detmax),
    }
}
