//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are always
//! printed. With `HANDCAL_ACCEPTANCE_STRICT=1` a failing criterion makes the
//! process exit non-zero; otherwise failures are reported but do not stop the
//! rest of `cargo test`.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{exhaustive_best, first_nonpositive, grid_segment_distance, matrix_chain_tip, richardson_jacobian, ridge_solution};
use handcal::estimation::{calibrate, solve_map, NoiseModel, ResidualModel, SolverOptions};
use handcal::experiment::{
    self as exp, CalibrationVariant, ExperimentConfig, OutputDir, StudyReport,
};
use handcal::geometry::{capsule_signed_distance, Capsule};
use handcal::kinematics::Frame;
use handcal::measurement::{contact_details, h_contact, jacobian, BodyPair, Measurement, PARALLEL_SIN};
use handcal::model::HandModel;
use handcal::oed::{log_d_optimality, select_detmax, CandidatePool, DetmaxOptions, SelectionMethod};
use handcal::sampling::{
    generate_search_trajectories, perturb, random_configuration, simulate_contact, simulate_contact_with_offset,
    task_errors, TrajectoryOptions,
};
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Contact sensitivity threshold and counts.
const EIG_THRESHOLD: f64 = 1e-6;
/// Task-deviation target and relative band.
const SCALE_TARGET_MM: f64 = 21.0;
const SCALE_BAND: f64 = 0.5;
const MIN_MODELS: usize = 10;
/// Tie allowance for the method ordering and the budget-300 target.
const ORDER_TIE: f64 = 0.05;
const BUDGET_300_TARGET: f64 = 0.0005;
/// Property-suite tolerances.
const CAPSULE_TOL: f64 = 1e-6;
const FK_TOL: f64 = 1e-12;
const CONTACT_JAC_TOL: f64 = 1e-4;
const TASK_JAC_TOL: f64 = 1e-5;
const RIDGE_TOL: f64 = 1e-8;
const DETMAX_FACTOR: f64 = 1e-6;
const EVENT_TOL: f64 = 1e-6;
const RECOVERY_TOL: f64 = 1e-6;

struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn config_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs"))
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(config_dir().join(name)).expect("shipped config loads")
}

fn mm(x: f64) -> String {
    format!("{:.3} mm", x * 1e3)
}

fn criterion_1() -> Verdict {
    let cfg = ExperimentConfig::new(2026);
    let s = exp::sensitivity_for_model(&cfg, "builtin:dlr_like", 0).unwrap();
    let all = s.mode("all_pairs").unwrap();
    let single = s.modes.iter().find(|m| m.label.starts_with("single_pair")).unwrap();
    let pass = all.contact.identifiable == 56
        && all.contact.n_params == 64
        && all.contact.kernel_dim == 8
        && single.contact.identifiable == 26
        && single.task.identifiable == 27
        && single.contact.n_params == 32
        && all.inclusion.included
        && !single.inclusion.included;
    Verdict {
        id: "1 identifiability counts (DLR-like)",
        pass,
        detail: format!(
            "all-pairs contact {}/{} (kernel {}), single pair contact {}/{} task {}/{}, inclusion all={} single={}",
            all.contact.identifiable,
            all.contact.n_params,
            all.contact.kernel_dim,
            single.contact.identifiable,
            single.contact.n_params,
            single.task.identifiable,
            single.task.n_params,
            all.inclusion.included,
            single.inclusion.included
        ),
    }
}

fn criterion_2() -> Verdict {
    let cfg = ExperimentConfig::new(2026);
    let s = exp::sensitivity_for_model(&cfg, "builtin:generic", 1).unwrap();
    let all = s.mode("all_pairs").unwrap();
    let smallest = all.contact.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    Verdict {
        id: "2 generic-hand identifiability",
        pass: all.contact.kernel_dim == 0 && all.contact.identifiable == 64,
        detail: format!(
            "all-pairs contact {}/{} (kernel {}, smallest eigenvalue {smallest:.2e} vs {EIG_THRESHOLD:.0e})",
            all.contact.identifiable, all.contact.n_params, all.contact.kernel_dim
        ),
    }
}

fn criterion_3(cfg: &ExperimentConfig) -> Verdict {
    let model = cfg.load_model().unwrap();
    let ts = exp::test_set(cfg, &model.tree).unwrap();
    let n = cfg.study.n_models.max(MIN_MODELS);
    let means: Vec<f64> = (0..n as u64)
        .map(|i| {
            let truth = exp::ground_truth(cfg, &model.tree, i).unwrap();
            let e = task_errors(&model.tree, &truth, &ts).unwrap();
            e.iter().sum::<f64>() / e.len() as f64
        })
        .collect();
    let mean = means.iter().sum::<f64>() / means.len() as f64 * 1e3;
    let (lo, hi) = (SCALE_TARGET_MM * (1.0 - SCALE_BAND), SCALE_TARGET_MM * (1.0 + SCALE_BAND));
    Verdict {
        id: "3 perturbation scale",
        pass: (lo..=hi).contains(&mean) && means.len() >= MIN_MODELS,
        detail: format!("mean task deviation {mean:.2} mm over {} models (band {lo:.1}..{hi:.1} mm)", means.len()),
    }
}

fn criterion_4(report: &StudyReport, budgets: &[usize]) -> Verdict {
    let mut pass = report.failed_models == 0 && report.n_models >= MIN_MODELS;
    let mut parts = Vec::new();
    for &b in budgets {
        let r = report.point(SelectionMethod::Random, b).unwrap().mean_error;
        let g = report.point(SelectionMethod::Greedy, b).unwrap().mean_error;
        let d = report.point(SelectionMethod::Detmax, b).unwrap().mean_error;
        let ok = d <= g * (1.0 + ORDER_TIE) && g <= r * (1.0 + ORDER_TIE);
        pass &= ok;
        parts.push(format!(
            "b{b}: detmax {} greedy {} random {}{}",
            mm(d),
            mm(g),
            mm(r),
            if ok { "" } else { " [order violated]" }
        ));
    }
    let g300 = report.point(SelectionMethod::Greedy, 300).unwrap().mean_error;
    let d300 = report.point(SelectionMethod::Detmax, 300).unwrap().mean_error;
    let target = g300 <= BUDGET_300_TARGET && d300 <= BUDGET_300_TARGET;
    pass &= target;
    parts.push(format!(
        "budget-300 target {} ({} failed models)",
        if target { "met" } else { "missed" },
        report.failed_models
    ));
    Verdict {
        id: "4 OED convergence ordering",
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_5(cfg: &ExperimentConfig) -> Verdict {
    let model = cfg.load_model().unwrap();
    let trajectories = exp::generate_all_trajectories(cfg, &model).unwrap();
    let index = cfg.simulation.ground_truth;
    let truth = exp::ground_truth(cfg, &model.tree, index).unwrap();
    let (dataset, _) = exp::simulate_dataset(cfg, &model.tree, &truth, index, &trajectories).unwrap();
    let report = exp::run_calibration(cfg, &dataset, Some(&truth)).unwrap();
    let jo = report.variant(CalibrationVariant::JointOffsets).unwrap();
    let full = report.variant(CalibrationVariant::FullDh).unwrap();
    let un = &report.uncalibrated;
    let within = |r: &[f64]| r.iter().filter(|v| v.abs() <= 0.001).count() as f64 / r.len() as f64;
    let (w_un, w_jo, w_full) = (
        within(&report.uncalibrated_residuals),
        within(&jo.held_out_residuals),
        within(&full.held_out_residuals),
    );
    let max_order = full.held_out.max < jo.held_out.max && jo.held_out.max < un.max;
    let narrows = full.held_out.mean < jo.held_out.mean && jo.held_out.mean < un.mean && w_full >= w_jo && w_jo >= w_un;
    Verdict {
        id: "5 calibration-variant ordering",
        pass: max_order && narrows,
        detail: format!(
            "{} contacts; max residual uncalibrated {} > joint offsets {} > full DH {}; mean {} / {} / {}; share within 1 mm {:.0}% / {:.0}% / {:.0}%",
            dataset.len(),
            mm(un.max),
            mm(jo.held_out.max),
            mm(full.held_out.max),
            mm(un.mean),
            mm(jo.held_out.mean),
            mm(full.held_out.mean),
            w_un * 100.0,
            w_jo * 100.0,
            w_full * 100.0
        ),
    }
}

fn random_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn suite_capsules() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let a = random_point(&mut rng);
        let b = if case % 10 == 0 { a } else { random_point(&mut rng) };
        let c1 = Capsule::new(a, b, rng.random_range(0.0..0.2)).unwrap();
        let c2 = Capsule::new(random_point(&mut rng), random_point(&mut rng), rng.random_range(0.0..0.2)).unwrap();
        let rot = Rotation3::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), 0.3);
        let f1 = Frame::new(random_point(&mut rng), *rot.matrix());
        let f2 = Frame::identity();
        let (a1, b1) = c1.segment_in(&f1);
        let (a2, b2) = c2.segment_in(&f2);
        let oracle = grid_segment_distance(&a1, &b1, &a2, &b2) - c1.radius - c2.radius;
        worst = worst.max((capsule_signed_distance(&c1, &f1, &c2, &f2) - oracle).abs());
    }
    (worst < CAPSULE_TOL, format!("(a) capsule max err {worst:.1e}"))
}

fn suite_fk() -> (bool, String) {
    let mut worst = 0.0f64;
    for (tree, seed) in [(HandModel::dlr_like().tree, 62), (HandModel::generic().tree, 63)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let q = random_configuration(&tree, &mut rng);
            for e in 0..tree.n_end_effectors() {
                let d = tree.tip_frame(&q, e).unwrap().to_homogeneous() - matrix_chain_tip(&tree, &q, e);
                worst = worst.max(d.amax());
            }
        }
    }
    (worst < FK_TOL, format!("(b) FK max err {worst:.1e}"))
}

fn suite_jacobians() -> (bool, String) {
    let model = HandModel::dlr_like();
    let tree = &model.tree;
    let layout = tree.calibration_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let rel = |m: &Measurement| {
        let markers = Some(&model.markers);
        let got = jacobian(tree, &layout, m, markers).unwrap();
        let oracle = richardson_jacobian(tree, &layout, m, markers, 1e-4);
        (&got - &oracle).amax() / oracle.amax().max(1e-12)
    };
    let (mut contact, mut task) = (0.0f64, 0.0f64);
    let pairs = BodyPair::all(4);
    let mut n_contact = 0;
    while n_contact < 12 {
        let q = random_configuration(tree, &mut rng);
        let pair = pairs[n_contact % pairs.len()];
        if contact_details(tree, &q, pair).unwrap().axis_sin > PARALLEL_SIN {
            contact = contact.max(rel(&Measurement::contact(q, pair)));
            n_contact += 1;
        }
    }
    for i in 0..6 {
        let q = random_configuration(tree, &mut rng);
        task = task.max(rel(&Measurement::task(q.clone(), None, vec![0.0; 9])));
        task = task.max(rel(&Measurement::cartesian(q, i % 4, Vector3::zeros())));
    }
    (
        contact < CONTACT_JAC_TOL && task < TASK_JAC_TOL,
        format!("(c) Jacobian rel err contact {contact:.1e} task/cartesian {task:.1e}"),
    )
}

struct Linear {
    a: DMatrix<f64>,
    y: DVector<f64>,
    sigma: DVector<f64>,
}

impl ResidualModel for Linear {
    fn residuals(&self, x: &DVector<f64>) -> handcal::Result<DVector<f64>> {
        Ok((&self.y - &self.a * x).component_div(&self.sigma))
    }

    fn jacobian(&self, _x: &DVector<f64>) -> handcal::Result<DMatrix<f64>> {
        let mut j = -self.a.clone();
        for (mut row, s) in j.row_iter_mut().zip(self.sigma.iter()) {
            row /= *s;
        }
        Ok(j)
    }
}

fn suite_ridge() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = rng.random_range(1..8usize);
        let m = rng.random_range(1..15usize);
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let sigma = DVector::from_fn(m, |_, _| rng.random_range(0.1..2.0));
        let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let p = DVector::from_fn(n, |_, _| 1.0 / rng.random_range(0.2..5.0f64).powi(2));
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let model = Linear { a: a.clone(), y: y.clone(), sigma: sigma.clone() };
        let sol = solve_map(&model, &x0, &mu, &p, &SolverOptions::default()).unwrap();
        let oracle = ridge_solution(&a, &y, &sigma.map(|s| 1.0 / (s * s)), &mu, &p);
        worst = worst.max((&sol.x - &oracle).amax());
    }
    (worst < RIDGE_TOL, format!("(d) MAP vs closed form {worst:.1e}"))
}

fn toy_pool(rng: &mut ChaCha8Rng, n_cand: usize, n: usize) -> CandidatePool {
    let jac = (0..n_cand)
        .map(|_| DMatrix::from_fn(rng.random_range(1..3), n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let sigmas = (0..n_cand).map(|_| rng.random_range(0.05..1.0)).collect();
    let rank = rng.random_range(1..=n);
    let jt = DMatrix::from_fn(rank, n, |_, _| rng.random_range(-1.0..1.0));
    let prior = DVector::from_fn(n, |_, _| rng.random_range(0.5..3.0));
    CandidatePool::new(jac, sigmas, jt.transpose() * jt, prior).unwrap()
}

fn suite_monotone() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut violations = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..7);
        let pool = toy_pool(&mut rng, 15, n);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let k = rng.random_range(0..pool.len());
        let small = log_d_optimality(&pool, &order[..k]).unwrap();
        let large = log_d_optimality(&pool, &order[..=k]).unwrap();
        if large > small + 1e-10 * small.abs().max(1.0) {
            violations += 1;
        }
    }
    (violations == 0, format!("(e) O_D monotonicity violations {violations}/500"))
}

fn suite_detmax() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let mut misses = 0;
    let cases = 200;
    for _ in 0..cases {
        let n_cand = rng.random_range(6..=12);
        let n = rng.random_range(2..6);
        let pool = toy_pool(&mut rng, n_cand, n);
        let budget = rng.random_range(1..=6.min(n_cand - 1));
        let best = exhaustive_best(&pool, budget);
        let got = select_detmax(&pool, budget, &DetmaxOptions::default()).unwrap().log_objective;
        if got > best + (1.0 + DETMAX_FACTOR).ln() {
            misses += 1;
        }
    }
    (misses == 0, format!("(f) DETMAX above exhaustive optimum {misses}/{cases}"))
}

fn suite_events() -> (bool, String) {
    let model = HandModel::dlr_like();
    let layout = model.tree.calibration_layout();
    let truth = perturb(&model.tree, &layout, 5f64.to_radians(), 0.005, &mut ChaCha8Rng::seed_from_u64(68)).unwrap();
    let opts = TrajectoryOptions { workspace_samples: 8000, ..Default::default() };
    let (mut worst, mut events, mut scans, mut scan_misses) = (0.0f64, 0, 0, 0);
    for (i, pair) in BodyPair::all(4).into_iter().enumerate() {
        for (j, t) in generate_search_trajectories(&model, pair, 25, &opts, 70 + i as u64).unwrap().iter().enumerate() {
            let Some(e) = simulate_contact(t, &truth, 0.0005, j as u64).unwrap() else { continue };
            worst = worst.max((h_contact(&truth, &e.q_contact, pair).unwrap() - e.noise_realization).abs());
            events += 1;
            if scans < 100 && j % 2 == 0 {
                let n = 100_000;
                let f = |s: f64| h_contact(&truth, &t.at(s), pair).unwrap() - e.noise_realization;
                match first_nonpositive(n, f) {
                    Some(k) if (e.t - k as f64 / n as f64).abs() <= 1.0 / n as f64 => {}
                    _ => scan_misses += 1,
                }
                scans += 1;
            }
        }
    }
    (
        worst < EVENT_TOL && scan_misses == 0,
        format!("(g) {events} events max |d - eps| {worst:.1e}, first-crossing misses {scan_misses}/{scans}"),
    )
}

fn suite_recovery() -> (bool, String) {
    let model = HandModel::dlr_like();
    let nominal = &model.tree;
    let layout = nominal.joint_offset_layout();
    let truth = perturb(nominal, &layout, 2f64.to_radians(), 0.0, &mut ChaCha8Rng::seed_from_u64(69)).unwrap();
    let opts = TrajectoryOptions { workspace_samples: 5000, ..Default::default() };
    let mut dataset = Vec::new();
    for (i, pair) in BodyPair::all(4).into_iter().enumerate() {
        for t in generate_search_trajectories(&model, pair, 15, &opts, 80 + i as u64).unwrap() {
            if let Some(e) = simulate_contact_with_offset(&t, &truth, 0.0).unwrap() {
                dataset.push(e.to_measurement(&t, 0));
            }
        }
    }
    let prior = nominal.parameters(&layout).unwrap();
    let prior = prior.with_prior_sigma(DVector::from_element(layout.len(), 1e3)).unwrap();
    let r = calibrate(&dataset, nominal, &prior, &NoiseModel::uniform(1e-5), &SolverOptions::default(), None).unwrap();
    let err = (r.theta_star.values() - truth.parameters(&layout).unwrap().values()).amax();
    (
        err < RECOVERY_TOL,
        format!("(h) noiseless joint-offset recovery {err:.1e} rad from {} contacts", dataset.len()),
    )
}

fn criterion_6() -> Verdict {
    let suites = [
        suite_capsules(),
        suite_fk(),
        suite_jacobians(),
        suite_ridge(),
        suite_monotone(),
        suite_detmax(),
        suite_events(),
        suite_recovery(),
    ];
    Verdict {
        id: "6 property suites",
        pass: suites.iter().all(|(ok, _)| *ok),
        detail: suites
            .iter()
            .map(|(ok, d)| if *ok { d.clone() } else { format!("{d} [FAIL]") })
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn write_all(cfg: &ExperimentConfig, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let out = OutputDir::create(cfg, dir).unwrap();
    let study = exp::run_simulation_study(cfg, Some(&out)).unwrap();
    exp::write_study(&out, &study).unwrap();
    let sens = exp::run_sensitivity(cfg).unwrap();
    exp::write_sensitivity(&out, &sens).unwrap();
    let model = cfg.load_model().unwrap();
    let trajectories = exp::generate_all_trajectories(cfg, &model).unwrap();
    let truth = exp::ground_truth(cfg, &model.tree, 0).unwrap();
    let (dataset, _) = exp::simulate_dataset(cfg, &model.tree, &truth, 0, &trajectories).unwrap();
    let cal = exp::run_calibration(cfg, &dataset, Some(&truth)).unwrap();
    exp::write_calibration(&out, cfg, &cal, &dataset).unwrap();
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((name, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn criterion_7() -> Verdict {
    let cfg = load("quick.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = write_all(&cfg, a.path());
    let second = write_all(&cfg, b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    Verdict {
        id: "7 determinism",
        pass: first.len() == second.len() && differing.is_empty() && !first.is_empty(),
        detail: format!("{} report files compared, {} differ {:?}", first.len(), differing.len(), differing),
    }
}

fn main() {
    let study_cfg = load("study.toml");
    let hardware_cfg = load("default.toml");
    let mut verdicts = Vec::new();
    let mut run = |f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        println!(
            "criterion {}: {} ({:.0} s) {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
        verdicts.push(v.pass);
    };
    run(&mut criterion_1);
    run(&mut criterion_2);
    run(&mut || criterion_3(&study_cfg));
    run(&mut || {
        let report = exp::run_simulation_study(&study_cfg, None).unwrap();
        criterion_4(&report, &study_cfg.study.budgets)
    });
    run(&mut || criterion_5(&hardware_cfg));
    run(&mut criterion_6);
    run(&mut criterion_7);
    let failed = verdicts.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 && std::env::var("HANDCAL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
