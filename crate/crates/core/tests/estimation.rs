mod common;

use common::ridge_solution;
use handcal::estimation::{calibrate, solve_map, NoiseModel, ResidualModel, SolverOptions};
use handcal::measurement::BodyPair;
use handcal::model::HandModel;
use handcal::sampling::{generate_search_trajectories, perturb, simulate_contact_with_offset, TrajectoryOptions};
use handcal::Result;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `r(x) = (y - A x) / sigma`: a frozen-Jacobian problem.
struct Linear {
    a: DMatrix<f64>,
    y: DVector<f64>,
    sigma: DVector<f64>,
}

impl ResidualModel for Linear {
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((&self.y - &self.a * x).component_div(&self.sigma))
    }

    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut j = -self.a.clone();
        for (mut row, s) in j.row_iter_mut().zip(self.sigma.iter()) {
            row /= *s;
        }
        Ok(j)
    }
}

fn linear_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..8usize);
    let m = rng.random_range(1..15usize);
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let sigma = DVector::from_fn(m, |_, _| rng.random_range(0.1..2.0));
    let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let prior_sigma = DVector::from_fn(n, |_, _| rng.random_range(0.2..5.0));
    let precision = prior_sigma.map(|s| 1.0 / (s * s));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let model = Linear { a: a.clone(), y: y.clone(), sigma: sigma.clone() };
    let sol = solve_map(&model, &x0, &mu, &precision, &SolverOptions::default()).unwrap();
    let w = sigma.map(|s| 1.0 / (s * s));
    let oracle = ridge_solution(&a, &y, &w, &mu, &precision);
    let err = (&sol.x - &oracle).amax();
    assert!(err < 1e-8, "seed {seed}: |x - x*| = {err:e} ({:?}, {} iterations, trace {:?})", sol.termination, sol.iterations, sol.cost_trace);
}

#[test]
fn linear_map_matches_closed_form() {
    for seed in 0..200 {
        linear_case(seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn linear_map_matches_closed_form_prop(seed in 1000u64..1_000_000) {
        linear_case(seed);
    }
}

#[test]
fn noiseless_joint_offsets_are_recovered() {
    let model = HandModel::dlr_like();
    let nominal = &model.tree;
    let layout = nominal.joint_offset_layout();
    let truth = perturb(nominal, &layout, 2f64.to_radians(), 0.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut dataset = Vec::new();
    for (i, pair) in BodyPair::all(4).into_iter().enumerate() {
        let opts = TrajectoryOptions { workspace_samples: 5000, ..Default::default() };
        for t in generate_search_trajectories(&model, pair, 15, &opts, 40 + i as u64).unwrap() {
            if let Some(e) = simulate_contact_with_offset(&t, &truth, 0.0).unwrap() {
                dataset.push(e.to_measurement(&t, 0));
            }
        }
    }
    let prior = nominal.parameters(&layout).unwrap();
    let prior = prior.with_prior_sigma(DVector::from_element(layout.len(), 1e3)).unwrap();
    let noise = NoiseModel::uniform(1e-5);
    let r = calibrate(&dataset, nominal, &prior, &noise, &SolverOptions::default(), None).unwrap();
    let want = truth.parameters(&layout).unwrap();
    let err = (r.theta_star.values() - want.values()).amax();
    assert!(err < 1e-6, "max parameter error {err:e} over {} contacts", dataset.len());
}
