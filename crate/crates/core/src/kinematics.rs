//! DH-parameterized forward kinematics for branched hands.
//!
//! A [`KinematicTree`] is a list of links in topological order, each
//! attached to a parent link (or to the common base). Every link carries
//! exactly four DH scalars and is evaluated as
//! `Rot_x(alpha) * Trans_x(r) * Rot_z(theta) * Trans_z(d)`, with the joint
//! value added to `theta` (revolute) or `d` (prismatic). Each end-effector
//! is the tip of a branch and owns a fingertip [`Capsule`].

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Capsule;
use crate::params::{ParamSlot, ParameterLayout, ParameterVector};

/// Rigid transform stored as position plus rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Default for Frame {
    fn default() -> Self {
        Self::identity()
    }
}

impl Frame {
    pub fn identity() -> Self {
        Frame {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>) -> Self {
        Frame { position, rotation }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Frame {
            position: t,
            rotation: Matrix3::identity(),
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Frame {
            position: Vector3::zeros(),
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        }
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Frame {
            position: Vector3::zeros(),
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        }
    }

    /// `self * other`: `other` expressed in `self`'s coordinates.
    #[inline]
    pub fn compose(&self, other: &Frame) -> Frame {
        Frame {
            position: self.rotation * other.position + self.position,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Frame {
        let rt = self.rotation.transpose();
        Frame {
            position: -(rt * self.position),
            rotation: rt,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.position
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Frame {
        Frame {
            position: m.fixed_view::<3, 1>(0, 3).into_owned(),
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
        }
    }

    /// `max |R^T R - I|`, the orthonormality defect of the rotation block.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }
}

impl std::ops::Mul for Frame {
    type Output = Frame;
    fn mul(self, rhs: Frame) -> Frame {
        self.compose(&rhs)
    }
}

/// The four DH fields, in the storage order used by parameter layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DhField {
    D,
    R,
    Alpha,
    Theta,
}

impl DhField {
    pub const ALL: [DhField; 4] = [DhField::D, DhField::R, DhField::Alpha, DhField::Theta];

    pub fn index(self) -> usize {
        match self {
            DhField::D => 0,
            DhField::R => 1,
            DhField::Alpha => 2,
            DhField::Theta => 3,
        }
    }

    pub fn is_rotational(self) -> bool {
        matches!(self, DhField::Alpha | DhField::Theta)
    }

    pub fn name(self) -> &'static str {
        match self {
            DhField::D => "d",
            DhField::R => "r",
            DhField::Alpha => "alpha",
            DhField::Theta => "theta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
    /// Joint value is `ratio * value(source)`; `source` is a link index.
    PassiveCoupled { source: usize, ratio: f64 },
}

impl JointKind {
    pub fn is_active(&self) -> bool {
        matches!(self, JointKind::Revolute | JointKind::Prismatic)
    }
}

/// One DH link: the four scalars plus the kind of joint acting on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhLink {
    pub d: f64,
    pub r: f64,
    pub alpha: f64,
    pub theta: f64,
    pub joint: JointKind,
}

impl DhLink {
    pub fn new(d: f64, r: f64, alpha: f64, theta: f64, joint: JointKind) -> Self {
        DhLink {
            d,
            r,
            alpha,
            theta,
            joint,
        }
    }

    pub fn get(&self, field: DhField) -> f64 {
        match field {
            DhField::D => self.d,
            DhField::R => self.r,
            DhField::Alpha => self.alpha,
            DhField::Theta => self.theta,
        }
    }

    pub fn set(&mut self, field: DhField, value: f64) {
        match field {
            DhField::D => self.d = value,
            DhField::R => self.r = value,
            DhField::Alpha => self.alpha = value,
            DhField::Theta => self.theta = value,
        }
    }

    /// The field a joint value is added to, if any.
    pub fn offset_field(&self) -> Option<DhField> {
        match self.joint {
            JointKind::Revolute | JointKind::PassiveCoupled { .. } => Some(DhField::Theta),
            JointKind::Prismatic => Some(DhField::D),
            JointKind::Fixed => None,
        }
    }
}

/// `Rot_x(alpha) * Trans_x(r) * Rot_z(theta) * Trans_z(d)` with the joint
/// value applied as an offset.
pub fn dh_to_frame(link: &DhLink, joint_value: f64) -> Frame {
    let (theta, d) = match link.joint {
        JointKind::Prismatic => (link.theta, link.d + joint_value),
        JointKind::Fixed => (link.theta, link.d),
        _ => (link.theta + joint_value, link.d),
    };
    let (sa, ca) = link.alpha.sin_cos();
    let (st, ct) = theta.sin_cos();
    // Rx(a) * Rz(t)
    let rotation = Matrix3::new(
        ct,
        -st,
        0.0,
        ca * st,
        ca * ct,
        -sa,
        sa * st,
        sa * ct,
        ca,
    );
    let position = Vector3::new(link.r, -d * sa, d * ca);
    Frame { position, rotation }
}

/// Joint configuration: one entry per active joint, in tree order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn zeros(n: usize) -> Self {
        Configuration(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Linear interpolation `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &Configuration, t: f64) -> Configuration {
        Configuration(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + t * (b - a))
                .collect(),
        )
    }
}

impl From<Vec<f64>> for Configuration {
    fn from(v: Vec<f64>) -> Self {
        Configuration(v)
    }
}

/// A link of the tree together with its calibration metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeLink {
    pub name: Arc<str>,
    pub parent: Option<usize>,
    pub dh: DhLink,
    /// Calibration mask in `DhField` order (d, r, alpha, theta).
    pub calibrate: [bool; 4],
    /// Prior standard deviation per field, same order as `calibrate`.
    pub prior_sigma: [f64; 4],
    /// Joint limits `[lower, upper]` for active joints.
    pub limits: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndEffector {
    pub name: Arc<str>,
    pub tip: usize,
    /// Link indices from the base to `tip`, inclusive.
    pub branch: Vec<usize>,
    pub capsule: Capsule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    links: Vec<TreeLink>,
    end_effectors: Vec<EndEffector>,
    config_index: Vec<Option<usize>>,
    n_active: usize,
}

impl KinematicTree {
    /// Builds a tree; end-effectors are given as `(name, tip link, capsule)`.
    pub fn new(
        links: Vec<TreeLink>,
        end_effectors: Vec<(String, usize, Capsule)>,
    ) -> Result<Self> {
        let mut config_index = Vec::with_capacity(links.len());
        let mut n_active = 0;
        for (i, link) in links.iter().enumerate() {
            if let Some(p) = link.parent {
                if p >= i {
                    return Err(Error::InvalidModel(format!(
                        "link {i} ('{}') has parent {p}; parents must precede children",
                        link.name
                    )));
                }
            }
            let dh = &link.dh;
            if ![dh.d, dh.r, dh.alpha, dh.theta].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidModel(format!("link {i} has non-finite DH values")));
            }
            if link.prior_sigma.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::InvalidModel(format!(
                    "link {i} has a non-positive prior sigma"
                )));
            }
            if let JointKind::PassiveCoupled { source, ratio } = dh.joint {
                if source >= i || !ratio.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "passive link {i} must couple to an earlier link with finite ratio"
                    )));
                }
                if matches!(links[source].dh.joint, JointKind::Fixed) {
                    return Err(Error::InvalidModel(format!(
                        "passive link {i} is coupled to fixed link {source}"
                    )));
                }
            }
            if let Some([lo, hi]) = link.limits {
                if !(lo <= hi) {
                    return Err(Error::InvalidModel(format!("link {i} has inverted limits")));
                }
            }
            if dh.joint.is_active() {
                config_index.push(Some(n_active));
                n_active += 1;
            } else {
                config_index.push(None);
            }
        }

        let mut ees = Vec::with_capacity(end_effectors.len());
        for (name, tip, capsule) in end_effectors {
            if tip >= links.len() {
                return Err(Error::InvalidModel(format!(
                    "end-effector '{name}' tip {tip} out of range"
                )));
            }
            capsule.validate()?;
            let mut branch = vec![tip];
            let mut cur = tip;
            while let Some(p) = links[cur].parent {
                branch.push(p);
                cur = p;
            }
            branch.reverse();
            ees.push(EndEffector {
                name: name.into(),
                tip,
                branch,
                capsule,
            });
        }
        if ees.is_empty() {
            return Err(Error::InvalidModel("model has no end-effectors".into()));
        }

        Ok(KinematicTree {
            links,
            end_effectors: ees,
            config_index,
            n_active,
        })
    }

    pub fn links(&self) -> &[TreeLink] {
        &self.links
    }

    pub fn end_effectors(&self) -> &[EndEffector] {
        &self.end_effectors
    }

    pub fn end_effector(&self, index: usize) -> Result<&EndEffector> {
        self.end_effectors.get(index).ok_or(Error::InvalidEndEffector {
            index,
            count: self.end_effectors.len(),
        })
    }

    pub fn n_end_effectors(&self) -> usize {
        self.end_effectors.len()
    }

    pub fn n_active_joints(&self) -> usize {
        self.n_active
    }

    /// Position of link `i`'s joint in the configuration vector.
    pub fn config_index(&self, link: usize) -> Option<usize> {
        self.config_index[link]
    }

    /// Configuration indices of the active joints on an end-effector's branch.
    pub fn branch_joints(&self, ee: usize) -> Result<Vec<usize>> {
        let ee = self.end_effector(ee)?;
        Ok(ee
            .branch
            .iter()
            .filter_map(|&l| self.config_index[l])
            .collect())
    }

    /// Joint limits per configuration entry; unlimited joints get `[-pi, pi]`.
    pub fn joint_limits(&self) -> Vec<[f64; 2]> {
        self.links
            .iter()
            .filter(|l| l.dh.joint.is_active())
            .map(|l| {
                l.limits
                    .unwrap_or([-std::f64::consts::PI, std::f64::consts::PI])
            })
            .collect()
    }

    pub fn within_limits(&self, q: &Configuration) -> bool {
        q.len() == self.n_active
            && self
                .joint_limits()
                .iter()
                .zip(&q.0)
                .all(|([lo, hi], v)| v.is_finite() && *v >= *lo - 1e-12 && *v <= *hi + 1e-12)
    }

    fn check_q(&self, q: &Configuration) -> Result<()> {
        if q.len() != self.n_active {
            return Err(Error::DimensionMismatch {
                what: "configuration",
                expected: self.n_active,
                got: q.len(),
            });
        }
        Ok(())
    }

    fn joint_value(&self, link: usize, q: &[f64]) -> f64 {
        match self.links[link].dh.joint {
            JointKind::Revolute | JointKind::Prismatic => q[self.config_index[link].unwrap()],
            JointKind::Fixed => 0.0,
            JointKind::PassiveCoupled { source, ratio } => ratio * self.joint_value(source, q),
        }
    }

    fn local_frame(&self, link: usize, q: &[f64]) -> Frame {
        dh_to_frame(&self.links[link].dh, self.joint_value(link, q))
    }

    /// Frames of every link relative to the base.
    pub fn forward_kinematics(&self, q: &Configuration) -> Result<Vec<Frame>> {
        self.check_q(q)?;
        let mut frames: Vec<Frame> = Vec::with_capacity(self.links.len());
        for (i, link) in self.links.iter().enumerate() {
            let local = self.local_frame(i, &q.0);
            let f = match link.parent {
                Some(p) => frames[p].compose(&local),
                None => local,
            };
            frames.push(f);
        }
        Ok(frames)
    }

    /// Frame of one end-effector, evaluating only its branch.
    pub fn tip_frame(&self, q: &Configuration, ee: usize) -> Result<Frame> {
        self.check_q(q)?;
        let ee = self.end_effector(ee)?;
        Ok(self.chain_frame(&ee.branch, &q.0))
    }

    /// Frames along an end-effector's branch, base first.
    pub fn branch_frames(&self, q: &Configuration, ee: usize) -> Result<Vec<Frame>> {
        self.check_q(q)?;
        let ee = self.end_effector(ee)?;
        let mut out = Vec::with_capacity(ee.branch.len());
        let mut f = Frame::identity();
        for &l in &ee.branch {
            f = f.compose(&self.local_frame(l, &q.0));
            out.push(f);
        }
        Ok(out)
    }

    fn chain_frame(&self, branch: &[usize], q: &[f64]) -> Frame {
        branch
            .iter()
            .fold(Frame::identity(), |f, &l| f.compose(&self.local_frame(l, q)))
    }

    /// Layout covering every masked field, ordered by link then field.
    pub fn calibration_layout(&self) -> ParameterLayout {
        let slots = self
            .links
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                DhField::ALL
                    .into_iter()
                    .filter(move |f| l.calibrate[f.index()])
                    .map(move |field| ParamSlot { link: i, field })
            })
            .collect();
        ParameterLayout::new(slots)
    }

    /// Joint-offset-only layout: `theta` of revolute/passive joints and `d`
    /// of prismatic joints, for links that are calibrated at all.
    pub fn joint_offset_layout(&self) -> ParameterLayout {
        let slots = self
            .links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.calibrate.iter().any(|c| *c))
            .filter_map(|(i, l)| {
                l.dh.offset_field()
                    .map(|field| ParamSlot { link: i, field })
            })
            .collect();
        ParameterLayout::new(slots)
    }

    /// Current values and priors for the given layout.
    pub fn parameters(&self, layout: &ParameterLayout) -> Result<ParameterVector> {
        self.check_layout(layout)?;
        let values: Vec<f64> = layout
            .slots()
            .iter()
            .map(|s| self.links[s.link].dh.get(s.field))
            .collect();
        let sigma: Vec<f64> = layout
            .slots()
            .iter()
            .map(|s| self.links[s.link].prior_sigma[s.field.index()])
            .collect();
        ParameterVector::new(layout.clone(), values.clone(), values, sigma)
    }

    fn check_layout(&self, layout: &ParameterLayout) -> Result<()> {
        if let Some(s) = layout.slots().iter().find(|s| s.link >= self.links.len()) {
            return Err(Error::LayoutMismatch(format!(
                "slot references link {} but model has {} links",
                s.link,
                self.links.len()
            )));
        }
        Ok(())
    }

    /// Returns a copy whose layout-selected DH fields are replaced by `theta`.
    pub fn with_parameters(&self, theta: &ParameterVector) -> Result<KinematicTree> {
        self.with_values(theta.layout(), theta.values().as_slice())
    }

    pub fn with_values(&self, layout: &ParameterLayout, values: &[f64]) -> Result<KinematicTree> {
        self.check_layout(layout)?;
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter values",
                expected: layout.len(),
                got: values.len(),
            });
        }
        let mut out = self.clone();
        for (slot, v) in layout.slots().iter().zip(values) {
            out.links[slot.link].dh.set(slot.field, *v);
        }
        Ok(out)
    }

    /// Single-field update used by finite differences.
    pub(crate) fn with_field(&self, slot: ParamSlot, value: f64) -> KinematicTree {
        let mut out = self.clone();
        out.links[slot.link].dh.set(slot.field, value);
        out
    }

    /// End-effector indices whose branch contains `link`.
    pub fn end_effectors_using(&self, link: usize) -> Vec<usize> {
        self.end_effectors
            .iter()
            .enumerate()
            .filter(|(_, e)| e.branch.contains(&link))
            .map(|(i, _)| i)
            .collect()
    }

    /// Links on the branches of the given end-effectors, sorted.
    pub fn links_of(&self, ees: &[usize]) -> Result<Vec<usize>> {
        let mut set = std::collections::BTreeSet::new();
        for &e in ees {
            set.extend(self.end_effector(e)?.branch.iter().copied());
        }
        Ok(set.into_iter().collect())
    }

    /// Upper bound on the distance from joint `link`'s axis to any point of
    /// end-effector `ee`'s capsule, used for motion bounds.
    pub(crate) fn lever_bound(&self, ee: usize, link: usize) -> f64 {
        let e = &self.end_effectors[ee];
        let Some(pos) = e.branch.iter().position(|&l| l == link) else {
            return 0.0;
        };
        let mut sum: f64 = 0.0;
        for &l in &e.branch[pos + 1..] {
            let dh = &self.links[l].dh;
            sum += dh.r.abs() + dh.d.abs();
        }
        // the joint's own d offset moves along its axis and adds no lever
        sum + e.capsule.a.norm().max(e.capsule.b.norm()) + e.capsule.radius
    }
}
