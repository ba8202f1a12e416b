//! Kinematic calibration of multi-fingered hands from pairwise fingertip
//! contacts.
//!
//! The crate covers the whole pipeline: DH forward kinematics of a branched
//! hand ([`kinematics`]), capsule signed distances ([`geometry`]), the task,
//! cartesian and contact measurement functions ([`measurement`]), MAP
//! identification ([`estimation`]), identifiability analysis
//! ([`identifiability`]), task D-optimal sample selection ([`oed`]), contact
//! sample generation and simulated contact search ([`sampling`]), and a seeded
//! experiment harness ([`experiment`]).
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists them.

pub mod dataset;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod geometry;
pub mod identifiability;
pub mod kinematics;
pub mod model;
pub mod measurement;
pub mod oed;
pub mod params;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use geometry::{capsule_signed_distance, segment_segment_distance, Capsule};
pub use kinematics::{dh_to_frame, Configuration, DhField, DhLink, Frame, JointKind, KinematicTree};
pub use measurement::{BodyPair, MarkerModel, Measurement, MeasurementKind};
pub use model::HandModel;
pub use params::{ParamSlot, ParameterLayout, ParameterVector};
