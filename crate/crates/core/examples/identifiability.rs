//! Identifiable parameter counts from contact and task Jacobian spectra.

use handcal::identifiability::{kernel_included, sensitivity, SensitivityMode, SensitivityOptions};
use handcal::measurement::MeasurementKind;
use handcal::model::HandModel;
use handcal::sampling::random_configuration;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> handcal::Result<()> {
    let options = SensitivityOptions::default();
    for model in [HandModel::dlr_like(), HandModel::generic()] {
        let tree = &model.tree;
        let layout = tree.calibration_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let configs: Vec<_> = (0..100).map(|_| random_configuration(tree, &mut rng)).collect();
        for mode in [SensitivityMode::SinglePair { k: 0, l: 1 }, SensitivityMode::AllPairs] {
            let contact = sensitivity(tree, &layout, &configs, MeasurementKind::Contact, mode, None, &options)?;
            let task = sensitivity(tree, &layout, &configs, MeasurementKind::Task, mode, None, &options)?;
            let inclusion = kernel_included(&contact, &task, 1e-4)?;
            println!(
                "{:<9} {:<16} contact {:2}/{:2}  task {:2}/{:2}  kernel inclusion {}",
                model.name,
                mode.label(),
                contact.identifiable(),
                contact.n_params(),
                task.identifiable(),
                task.n_params(),
                inclusion.included
            );
        }
    }
    Ok(())
}
