//! Forward kinematics of the built-in hands and of a model loaded from TOML.

use handcal::model::HandModel;
use handcal::sampling::random_configuration;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> handcal::Result<()> {
    let source = HandModel::builtin_source("dlr_like").expect("built-in model");
    let model = HandModel::from_toml_str(source)?;
    let tree = &model.tree;
    println!(
        "dlr_like: {} links, {} active joints, {} fingertips, {} calibrated parameters",
        tree.links().len(),
        tree.n_active_joints(),
        tree.n_end_effectors(),
        tree.calibration_layout().len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random_configuration(tree, &mut rng);
    for e in 0..tree.n_end_effectors() {
        let p = tree.tip_frame(&q, e)?.position * 1e3;
        println!("fingertip {e}: ({:7.2}, {:7.2}, {:7.2}) mm", p.x, p.y, p.z);
    }

    let generic = HandModel::generic();
    let p = generic.tree.tip_frame(&random_configuration(&generic.tree, &mut rng), 0)?.position * 1e3;
    println!("generic fingertip 0: ({:7.2}, {:7.2}, {:7.2}) mm", p.x, p.y, p.z);
    Ok(())
}
