//! Task D-optimal selection of contact measurements.

use handcal::estimation::NoiseModel;
use handcal::experiment::{self as exp, ExperimentConfig};
use handcal::oed::{select, CandidatePool, DetmaxOptions, SelectionMethod};

fn main() -> handcal::Result<()> {
    let mut cfg = ExperimentConfig::new(9);
    cfg.trajectories.per_pair = 40;
    cfg.test_set.size = 300;
    let model = cfg.load_model()?;
    let tree = &model.tree;
    let layout = tree.calibration_layout();
    let truth = exp::ground_truth(&cfg, tree, 0)?;
    let trajectories = exp::generate_all_trajectories(&cfg, &model)?;
    let (dataset, _) = exp::simulate_dataset(&cfg, tree, &truth, 0, &trajectories)?;
    let test_set = exp::test_set(&cfg, tree)?;
    let prior_sigma = tree.parameters(&layout)?.prior_sigma().clone();
    let pool = CandidatePool::from_measurements(tree, &layout, &dataset, &test_set, &NoiseModel::default(), prior_sigma, None)?;
    println!("{} candidates, {} parameters", pool.len(), pool.n_params());

    for budget in [20, 60, 120] {
        for method in [SelectionMethod::Random, SelectionMethod::Greedy, SelectionMethod::Detmax] {
            let r = select(&pool, method, budget, 1, &DetmaxOptions::default())?;
            println!("budget {budget:3} {:<7} log O_D {:10.4}", method.name(), r.log_objective);
        }
    }
    Ok(())
}
