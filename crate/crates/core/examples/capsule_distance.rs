//! Signed distance between fingertip capsules and the contact function.

use handcal::geometry::{capsule_signed_distance, Capsule};
use handcal::kinematics::Frame;
use handcal::measurement::{contact_details, h_contact, BodyPair};
use handcal::model::HandModel;
use nalgebra::Vector3;

fn main() -> handcal::Result<()> {
    let a = Capsule::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.03), 0.01)?;
    let b = Capsule::new(Vector3::new(0.0, -0.02, 0.0), Vector3::new(0.0, 0.02, 0.0), 0.008)?;
    for gap in [0.03, 0.018, 0.01] {
        let fb = Frame::new(Vector3::new(gap, 0.0, 0.015), nalgebra::Matrix3::identity());
        let d = capsule_signed_distance(&a, &Frame::identity(), &b, &fb);
        println!("offset {:5.1} mm -> signed distance {:7.3} mm", gap * 1e3, d * 1e3);
    }

    let model = HandModel::dlr_like();
    let q = model.parked_configuration(0, 1);
    for pair in BodyPair::all(model.tree.n_end_effectors()) {
        let d = h_contact(&model.tree, &q, pair)?;
        let details = contact_details(&model.tree, &q, pair)?;
        println!(
            "pair ({}, {}) at park: distance {:7.2} mm, axis sine {:.3}",
            pair.k,
            pair.l,
            d * 1e3,
            details.axis_sin
        );
    }
    Ok(())
}
