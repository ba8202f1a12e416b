mod common;

use common::first_nonpositive;
use handcal::kinematics::{Configuration, DhLink, JointKind, KinematicTree, TreeLink};
use handcal::geometry::Capsule;
use handcal::measurement::{h_contact, BodyPair};
use handcal::model::HandModel;
use handcal::sampling::{
    generate_search_trajectories, path_is_clear, perturb, shared_workspace, simulate_contact,
    set_finger, simulate_contact_with_offset, uniform_task_test_set, GridOptions, TrajectoryOptions, CONTACT_TOL,
};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_opts() -> TrajectoryOptions {
    TrajectoryOptions { workspace_samples: 8000, ..Default::default() }
}

/// Two one-joint fingers of the given length; the second is mounted at `offset`.
fn arc_tree(offset: f64) -> KinematicTree {
    let link = |name: &str, parent, dh: DhLink, limits| TreeLink {
        name: name.into(),
        parent,
        dh,
        calibrate: [true; 4],
        prior_sigma: [0.005, 0.005, 0.087, 0.087],
        limits,
    };
    let links = vec![
        link("a0", None, DhLink::new(0.0, 0.0, 0.0, 0.0, JointKind::Revolute), Some([-1.2, 1.2])),
        link("a1", Some(0), DhLink::new(0.0, 0.1, 0.0, 0.0, JointKind::Fixed), None),
        link("b0", None, DhLink::new(0.0, offset, 0.0, 0.0, JointKind::Revolute), Some([-1.2, 1.2])),
        link("b1", Some(2), DhLink::new(0.0, 0.1, 0.0, 0.0, JointKind::Fixed), None),
    ];
    let cap = Capsule::sphere(Vector3::zeros(), 0.005).unwrap();
    KinematicTree::new(links, vec![("a".into(), 1, cap), ("b".into(), 3, cap)]).unwrap()
}

#[test]
fn arc_test_set_is_uniform_over_cells() {
    let tree = arc_tree(1.0);
    let grid = GridOptions { cell_size: 0.02, samples_per_finger: 20000 };
    let ts = uniform_task_test_set(&tree, 4000, &grid, 3).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for q in &ts {
        let p = tree.tip_frame(q, 0).unwrap().position;
        let key = ((p.x / 0.02).floor() as i64, (p.y / 0.02).floor() as i64, (p.z / 0.02).floor() as i64);
        *counts.entry(key).or_insert(0usize) += 1;
    }
    let k = counts.len() as f64;
    let expected = ts.len() as f64 / k;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(k - 1.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi-square {chi2} over {k} cells, p = {p}");
}

#[test]
fn test_set_is_deterministic() {
    let tree = HandModel::dlr_like().tree;
    let g = GridOptions { cell_size: 0.005, samples_per_finger: 3000 };
    assert_eq!(uniform_task_test_set(&tree, 50, &g, 8).unwrap(), uniform_task_test_set(&tree, 50, &g, 8).unwrap());
}

#[test]
fn shared_workspace_cases() {
    let twins = arc_tree(0.0);
    let s = shared_workspace(&twins, BodyPair { k: 0, l: 1 }, 5000, 0.01, 1).unwrap();
    assert!(!s.cells.is_empty());
    let apart = arc_tree(1.0);
    assert!(shared_workspace(&apart, BodyPair { k: 0, l: 1 }, 5000, 0.01, 1).is_err());

    let tree = HandModel::dlr_like().tree;
    let s = shared_workspace(&tree, BodyPair { k: 0, l: 1 }, 100_000, 0.01, 2).unwrap();
    let diag = 0.01 * 3f64.sqrt();
    let tip = |finger: usize, values: &[f64]| {
        let mut q = Configuration::zeros(tree.n_active_joints());
        set_finger(&tree, &mut q, finger, values).unwrap();
        tree.tip_frame(&q, finger).unwrap().position
    };
    for (first, second) in s.cells.values() {
        for a in first {
            let pa = tip(0, &a.q);
            assert!((pa - a.tip).norm() < 1e-12);
            for b in second.iter().take(20) {
                assert!((pa - tip(1, &b.q)).norm() <= diag + 1e-12);
            }
        }
    }
}

#[test]
fn trajectories_bracket_and_stay_clear_on_the_nominal_model() {
    let model = HandModel::dlr_like();
    let opts = small_opts();
    for (i, pair) in BodyPair::all(4).into_iter().enumerate() {
        let trajs = generate_search_trajectories(&model, pair, 50, &opts, 100 + i as u64).unwrap();
        assert_eq!(trajs.len(), 50);
        for t in &trajs {
            let d0 = h_contact(&model.tree, &t.q_start, pair).unwrap();
            let d1 = h_contact(&model.tree, &t.q_end, pair).unwrap();
            assert!(d0 > opts.start_margin && d1 < opts.collision_threshold, "{d0} {d1}");
            assert!(path_is_clear(&model, t, opts.clearance_margin, opts.clearance_steps).unwrap());
            let e = simulate_contact_with_offset(t, &model.tree, 0.0).unwrap().expect("nominal drive crosses");
            assert!(h_contact(&model.tree, &e.q_contact, pair).unwrap().abs() < 1e-6);
        }
    }
}

#[test]
fn contact_events_match_their_noise_and_first_crossing() {
    let model = HandModel::dlr_like();
    let layout = model.tree.calibration_layout();
    let truth = perturb(&model.tree, &layout, 5f64.to_radians(), 0.005, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut checked = 0;
    for (i, pair) in BodyPair::all(4).into_iter().enumerate() {
        for (j, t) in generate_search_trajectories(&model, pair, 20, &small_opts(), 200 + i as u64).unwrap().iter().enumerate() {
            let Some(e) = simulate_contact(t, &truth, 0.0005, j as u64).unwrap() else { continue };
            let d = h_contact(&truth, &e.q_contact, pair).unwrap();
            assert!((d - e.noise_realization).abs() < 1e-6);
            assert!((d - e.noise_realization).abs() <= CONTACT_TOL * 10.0);
            if checked < 100 {
                let n = 100_000;
                let f = |s: f64| h_contact(&truth, &t.at(s), pair).unwrap() - e.noise_realization;
                let first = first_nonpositive(n, f).expect("dense scan crosses");
                let step = 1.0 / n as f64;
                let scan = first as f64 * step;
                assert!((e.t - scan).abs() <= step, "t* {} vs scan crossing {scan}", e.t);
                assert!(e.t > scan - step, "an earlier crossing was skipped");
                checked += 1;
            }
        }
    }
    assert!(checked >= 50);
}

#[test]
fn simulation_is_deterministic() {
    let model = HandModel::dlr_like();
    let pair = BodyPair { k: 1, l: 2 };
    let a = generate_search_trajectories(&model, pair, 10, &small_opts(), 9).unwrap();
    let b = generate_search_trajectories(&model, pair, 10, &small_opts(), 9).unwrap();
    assert_eq!(a, b);
    let ea: Vec<_> = a.iter().map(|t| simulate_contact(t, &model.tree, 1e-3, 5).unwrap().map(|e| e.q_contact)).collect();
    let eb: Vec<_> = b.iter().map(|t| simulate_contact(t, &model.tree, 1e-3, 5).unwrap().map(|e| e.q_contact)).collect();
    assert_eq!(ea, eb);
}
