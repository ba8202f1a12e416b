//! Hand-model configuration files.
//!
//! Models are TOML documents with `schema_version = 1`. Lengths are in
//! metres, angles in degrees. See `models/dlr_like.toml` for a complete
//! example and the README for the field reference.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Capsule;
use crate::kinematics::{Configuration, DhField, DhLink, JointKind, KinematicTree, TreeLink};
use crate::measurement::MarkerModel;
use crate::kinematics::Frame;

pub const SCHEMA_VERSION: u32 = 1;

const DLR_LIKE: &str = include_str!("../models/dlr_like.toml");
const GENERIC: &str = include_str!("../models/generic.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub prior: PriorDefaults,
    #[serde(default = "default_proxy_radius")]
    pub proxy_radius: f64,
    pub links: Vec<LinkSpec>,
    pub end_effectors: Vec<EndEffectorSpec>,
    #[serde(default)]
    pub palm: Vec<CapsuleSpec>,
    #[serde(default)]
    pub parked: Vec<ParkedSpec>,
}

fn default_proxy_radius() -> f64 {
    0.008
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorDefaults {
    pub sigma_rot_deg: f64,
    pub sigma_trans: f64,
}

impl Default for PriorDefaults {
    fn default() -> Self {
        PriorDefaults {
            sigma_rot_deg: 5.0,
            sigma_trans: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointSpec {
    Revolute,
    Prismatic,
    Fixed,
    Passive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub joint: JointSpec,
    /// Source link for passive joints.
    #[serde(default)]
    pub coupled_to: Option<String>,
    #[serde(default = "one")]
    pub ratio: f64,
    #[serde(default)]
    pub d: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub alpha_deg: f64,
    #[serde(default)]
    pub theta_deg: f64,
    /// Calibrated fields; defaults to all four for non-fixed links.
    #[serde(default)]
    pub calibrate: Option<Vec<DhField>>,
    /// Per-field prior overrides (metres or degrees).
    #[serde(default)]
    pub prior_sigma: BTreeMap<DhField, f64>,
    #[serde(default)]
    pub limits_deg: Option<[f64; 2]>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleSpec {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl CapsuleSpec {
    fn build(&self) -> Result<Capsule> {
        Capsule::new(Vector3::from(self.a), Vector3::from(self.b), self.radius)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndEffectorSpec {
    pub name: String,
    pub tip: String,
    pub capsule: CapsuleSpec,
    #[serde(default)]
    pub marker: [f64; 3],
    /// Default parked configuration of this finger's active joints (deg).
    pub parked_deg: Vec<f64>,
}

/// Parked configuration override for one finger while `pair` is measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParkedSpec {
    pub pair: [String; 2],
    pub finger: String,
    pub q_deg: Vec<f64>,
}

/// A loaded hand: kinematic tree plus sampling-time metadata.
#[derive(Debug, Clone)]
pub struct HandModel {
    pub name: String,
    pub tree: KinematicTree,
    pub markers: MarkerModel,
    /// Palm collision proxies in the base frame.
    pub palm: Vec<Capsule>,
    pub proxy_radius: f64,
    parked_default: Vec<Vec<f64>>,
    parked_override: BTreeMap<(usize, usize, usize), Vec<f64>>,
}

impl HandModel {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("model file: {e}")))?;
        Self::from_file_spec(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Built-in model by name (`dlr_like` or `generic`).
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "dlr_like" | "dlr-like" => Self::from_toml_str(DLR_LIKE),
            "generic" => Self::from_toml_str(GENERIC),
            other => Err(Error::Config(format!("unknown built-in model '{other}'"))),
        }
    }

    /// Loads `builtin:<name>` or a file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec.strip_prefix("builtin:") {
            Some(name) => Self::builtin(name),
            None => Self::load(spec),
        }
    }

    pub fn builtin_source(name: &str) -> Option<&'static str> {
        match name {
            "dlr_like" | "dlr-like" => Some(DLR_LIKE),
            "generic" => Some(GENERIC),
            _ => None,
        }
    }

    pub fn dlr_like() -> Self {
        Self::builtin("dlr_like").expect("built-in model is valid")
    }

    pub fn generic() -> Self {
        Self::builtin("generic").expect("built-in model is valid")
    }

    pub fn from_file_spec(file: &ModelFile) -> Result<Self> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported model schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let index: BTreeMap<&str, usize> = file
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect();
        if index.len() != file.links.len() {
            return Err(Error::InvalidModel("duplicate link names".into()));
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidModel(format!("unknown link '{name}'")))
        };

        let rot_sigma = file.prior.sigma_rot_deg.to_radians();
        let mut links = Vec::with_capacity(file.links.len());
        for spec in &file.links {
            let joint = match spec.joint {
                JointSpec::Revolute => JointKind::Revolute,
                JointSpec::Prismatic => JointKind::Prismatic,
                JointSpec::Fixed => JointKind::Fixed,
                JointSpec::Passive => {
                    let src = spec.coupled_to.as_deref().ok_or_else(|| {
                        Error::InvalidModel(format!("passive link '{}' needs coupled_to", spec.name))
                    })?;
                    JointKind::PassiveCoupled {
                        source: lookup(src)?,
                        ratio: spec.ratio,
                    }
                }
            };
            let mut calibrate = [false; 4];
            match &spec.calibrate {
                Some(fields) => fields.iter().for_each(|f| calibrate[f.index()] = true),
                None if joint != JointKind::Fixed => calibrate = [true; 4],
                None => {}
            }
            let mut prior_sigma = [0.0; 4];
            for f in DhField::ALL {
                let default = if f.is_rotational() {
                    rot_sigma
                } else {
                    file.prior.sigma_trans
                };
                prior_sigma[f.index()] = match spec.prior_sigma.get(&f) {
                    Some(v) if f.is_rotational() => v.to_radians(),
                    Some(v) => *v,
                    None => default,
                };
            }
            links.push(TreeLink {
                name: spec.name.as_str().into(),
                parent: spec.parent.as_deref().map(lookup).transpose()?,
                dh: DhLink::new(
                    spec.d,
                    spec.r,
                    spec.alpha_deg.to_radians(),
                    spec.theta_deg.to_radians(),
                    joint,
                ),
                calibrate,
                prior_sigma,
                limits: spec
                    .limits_deg
                    .map(|[lo, hi]| [lo.to_radians(), hi.to_radians()]),
            });
        }

        let ees = file
            .end_effectors
            .iter()
            .map(|e| Ok((e.name.clone(), lookup(&e.tip)?, e.capsule.build()?)))
            .collect::<Result<Vec<_>>>()?;
        let tree = KinematicTree::new(links, ees)?;

        let mut parked_default = Vec::new();
        for (k, e) in file.end_effectors.iter().enumerate() {
            let n = tree.branch_joints(k)?.len();
            if e.parked_deg.len() != n {
                return Err(Error::InvalidModel(format!(
                    "parked_deg for '{}' has {} entries, finger has {n} active joints",
                    e.name,
                    e.parked_deg.len()
                )));
            }
            parked_default.push(e.parked_deg.iter().map(|v| v.to_radians()).collect());
        }
        let ee_index = |name: &str| {
            file.end_effectors
                .iter()
                .position(|e| e.name == name)
                .ok_or_else(|| Error::InvalidModel(format!("unknown end-effector '{name}'")))
        };
        let mut parked_override = BTreeMap::new();
        for p in &file.parked {
            let (a, b) = (ee_index(&p.pair[0])?, ee_index(&p.pair[1])?);
            let f = ee_index(&p.finger)?;
            if p.q_deg.len() != tree.branch_joints(f)?.len() {
                return Err(Error::InvalidModel(format!(
                    "parked override for '{}' has wrong length",
                    p.finger
                )));
            }
            parked_override.insert(
                (a.min(b), a.max(b), f),
                p.q_deg.iter().map(|v| v.to_radians()).collect(),
            );
        }

        let markers = MarkerModel::new(
            file.end_effectors
                .iter()
                .map(|e| Vector3::from(e.marker))
                .collect(),
            Frame::identity(),
        );
        let palm = file
            .palm
            .iter()
            .map(CapsuleSpec::build)
            .collect::<Result<Vec<_>>>()?;

        Ok(HandModel {
            name: file.name.clone(),
            tree,
            markers,
            palm,
            proxy_radius: file.proxy_radius,
            parked_default,
            parked_override,
        })
    }

    /// Parked joint values of `finger` while the pair `(k, l)` is measured.
    pub fn parked(&self, k: usize, l: usize, finger: usize) -> &[f64] {
        self.parked_override
            .get(&(k.min(l), k.max(l), finger))
            .unwrap_or(&self.parked_default[finger])
    }

    /// Full-hand configuration with every finger other than `k`, `l` parked
    /// and the pair's own joints at zero.
    pub fn parked_configuration(&self, k: usize, l: usize) -> Configuration {
        let mut q = Configuration::zeros(self.tree.n_active_joints());
        for f in 0..self.tree.n_end_effectors() {
            if f == k || f == l {
                continue;
            }
            let joints = self.tree.branch_joints(f).expect("valid finger");
            for (j, v) in joints.iter().zip(self.parked(k, l, f)) {
                q.0[*j] = *v;
            }
        }
        q
    }

    /// Replaces the tree, keeping the sampling metadata.
    pub fn with_tree(&self, tree: KinematicTree) -> HandModel {
        HandModel {
            tree,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_load() {
        for m in [HandModel::dlr_like(), HandModel::generic()] {
            assert_eq!(m.tree.n_end_effectors(), 4);
            assert_eq!(m.tree.n_active_joints(), 12);
            assert_eq!(m.tree.calibration_layout().len(), 64);
            assert_eq!(m.tree.joint_offset_layout().len(), 16);
        }
    }

    #[test]
    fn rejects_wrong_schema_version() {
        let text = DLR_LIKE.replacen("schema_version = 1", "schema_version = 7", 1);
        assert!(matches!(HandModel::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_unknown_parent() {
        let text = DLR_LIKE.replacen("parent = \"thumb_mount\"", "parent = \"nope\"", 1);
        assert!(HandModel::from_toml_str(&text).is_err());
    }

    #[test]
    fn parked_configuration_leaves_pair_at_zero() {
        let m = HandModel::dlr_like();
        let q = m.parked_configuration(0, 1);
        for j in m.tree.branch_joints(0).unwrap() {
            assert_eq!(q.0[j], 0.0);
        }
        assert!(m.tree.within_limits(&q));
    }
}
