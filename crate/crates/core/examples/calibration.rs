//! Joint-offset and full-DH calibration from simulated contacts.

use handcal::estimation::{calibrate, NoiseModel, SolverOptions};
use handcal::experiment::{self as exp, ExperimentConfig};
use handcal::sampling::task_errors;

fn main() -> handcal::Result<()> {
    let mut cfg = ExperimentConfig::new(5);
    cfg.trajectories.per_pair = 40;
    let model = cfg.load_model()?;
    let nominal = &model.tree;
    let truth = exp::ground_truth(&cfg, nominal, 0)?;
    let trajectories = exp::generate_all_trajectories(&cfg, &model)?;
    let (dataset, summary) = exp::simulate_dataset(&cfg, nominal, &truth, 0, &trajectories)?;
    println!("{} contacts from {} drives", summary.contacts, summary.drives);

    let test_set = exp::test_set(&cfg, nominal)?;
    let mean_mm = |e: Vec<f64>| e.iter().sum::<f64>() / e.len() as f64 * 1e3;
    println!("uncalibrated task error {:.3} mm", mean_mm(task_errors(nominal, &truth, &test_set)?));

    let noise = NoiseModel::uniform(0.0005);
    for (name, layout) in [("joint offsets", nominal.joint_offset_layout()), ("full DH", nominal.calibration_layout())] {
        let initial = nominal.parameters(&layout)?;
        let result = calibrate(&dataset, nominal, &initial, &noise, &SolverOptions::default(), None)?;
        let fitted = nominal.with_values(&layout, result.theta_star.values().as_slice())?;
        println!(
            "{name:<13}: {} iterations, task error {:.3} mm",
            result.iterations,
            mean_mm(task_errors(&fitted, &truth, &test_set)?)
        );
    }
    Ok(())
}
