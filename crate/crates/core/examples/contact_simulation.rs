//! Contact search drives on a perturbed hand and the resulting dataset.

use handcal::dataset::to_jsonl;
use handcal::measurement::BodyPair;
use handcal::model::HandModel;
use handcal::sampling::{generate_search_trajectories, perturb, simulate_contact, TrajectoryOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> handcal::Result<()> {
    let model = HandModel::dlr_like();
    let layout = model.tree.calibration_layout();
    let truth = perturb(&model.tree, &layout, 5f64.to_radians(), 0.005, &mut ChaCha8Rng::seed_from_u64(3))?;
    let options = TrajectoryOptions::default();

    let mut dataset = Vec::new();
    for (i, pair) in BodyPair::all(model.tree.n_end_effectors()).into_iter().enumerate() {
        let drives = generate_search_trajectories(&model, pair, 20, &options, 100 + i as u64)?;
        let mut hits = 0;
        for (j, drive) in drives.iter().enumerate() {
            if let Some(event) = simulate_contact(drive, &truth, 0.0005, j as u64)? {
                dataset.push(event.to_measurement(drive, j as u64));
                hits += 1;
            }
        }
        println!("pair ({}, {}): {hits}/{} drives ended in contact", pair.k, pair.l, drives.len());
    }
    let text = to_jsonl(&dataset)?;
    println!("{} contacts, first record:\n{}", dataset.len(), text.lines().next().unwrap_or(""));
    Ok(())
}
