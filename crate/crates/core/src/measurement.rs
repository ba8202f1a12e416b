//! Task, cartesian and contact measurement functions and their
//! finite-difference Jacobians with respect to the calibration parameters.
//!
//! Stacking order is fixed: task rows are `k = 2..N` relative to the first
//! end-effector in scope, xyz-major; contact pairs are enumerated
//! lexicographically by `(k, l)`.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{capsule_contact, CapsuleContact};
use crate::kinematics::{Configuration, Frame, KinematicTree};
use crate::params::{ParamSlot, ParameterLayout};

/// Finite-difference step, in radians for angles and metres for lengths.
pub const FD_STEP: f64 = 1e-6;

/// Axes closer to parallel than this are flagged as non-smooth contacts.
pub const PARALLEL_SIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    Task,
    Cartesian,
    Contact,
}

/// Ordered end-effector pair `(k, l)` with `k < l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BodyPair {
    pub k: usize,
    pub l: usize,
}

impl BodyPair {
    pub fn new(k: usize, l: usize, n_ee: usize) -> Result<Self> {
        if k >= l || l >= n_ee {
            return Err(Error::InvalidPair { k, l, count: n_ee });
        }
        Ok(BodyPair { k, l })
    }

    /// All `C(n, 2)` pairs in lexicographic order.
    pub fn all(n_ee: usize) -> Vec<BodyPair> {
        Self::among(&(0..n_ee).collect::<Vec<_>>())
    }

    /// Pairs among a sorted subset of end-effectors.
    pub fn among(ees: &[usize]) -> Vec<BodyPair> {
        let mut out = Vec::new();
        for (i, &k) in ees.iter().enumerate() {
            for &l in &ees[i + 1..] {
                out.push(BodyPair { k, l });
            }
        }
        out
    }

    fn check(&self, tree: &KinematicTree) -> Result<()> {
        BodyPair::new(self.k, self.l, tree.n_end_effectors()).map(|_| ())
    }
}

/// Marker offsets in the tip frames and the camera-to-base transform.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerModel {
    pub marker_offsets: Vec<Vector3<f64>>,
    pub camera_to_base: Frame,
}

impl MarkerModel {
    pub fn new(marker_offsets: Vec<Vector3<f64>>, camera_to_base: Frame) -> Self {
        MarkerModel {
            marker_offsets,
            camera_to_base,
        }
    }
}

/// Provenance of a simulated or recorded measurement.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_start: Option<Configuration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_end: Option<Configuration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_finger: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_realization: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub near_parallel: bool,
}

/// One dataset entry `(q, y)` with its kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub q: Configuration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<BodyPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_effector: Option<usize>,
    /// Task scope (sorted end-effectors); `None` means the whole hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Vec<usize>>,
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<MeasurementMeta>,
}

impl Measurement {
    /// Contact measurement: by definition `y = 0`.
    pub fn contact(q: Configuration, pair: BodyPair) -> Self {
        Measurement {
            kind: MeasurementKind::Contact,
            q,
            pair: Some(pair),
            end_effector: None,
            scope: None,
            y: vec![0.0],
            metadata: None,
        }
    }

    pub fn task(q: Configuration, scope: Option<Vec<usize>>, y: Vec<f64>) -> Self {
        Measurement {
            kind: MeasurementKind::Task,
            q,
            pair: None,
            end_effector: None,
            scope,
            y,
            metadata: None,
        }
    }

    pub fn cartesian(q: Configuration, end_effector: usize, y: Vector3<f64>) -> Self {
        Measurement {
            kind: MeasurementKind::Cartesian,
            q,
            pair: None,
            end_effector: Some(end_effector),
            scope: None,
            y: y.as_slice().to_vec(),
            metadata: None,
        }
    }

    pub fn with_metadata(mut self, meta: MeasurementMeta) -> Self {
        self.metadata = Some(meta);
        self
    }

    /// End-effectors whose kinematics this measurement depends on.
    pub fn end_effectors(&self, n_ee: usize) -> Vec<usize> {
        match self.kind {
            MeasurementKind::Task => self.scope.clone().unwrap_or_else(|| (0..n_ee).collect()),
            MeasurementKind::Cartesian => self.end_effector.into_iter().collect(),
            MeasurementKind::Contact => self.pair.map(|p| vec![p.k, p.l]).unwrap_or_default(),
        }
    }

    pub fn dim(&self, n_ee: usize) -> usize {
        match self.kind {
            MeasurementKind::Task => 3 * self.end_effectors(n_ee).len().saturating_sub(1),
            MeasurementKind::Cartesian => 3,
            MeasurementKind::Contact => 1,
        }
    }

    /// Checks that `y`, the pair and the end-effector fit the tree.
    pub fn validate(&self, tree: &KinematicTree) -> Result<()> {
        let n_ee = tree.n_end_effectors();
        if self.q.len() != tree.n_active_joints() {
            return Err(Error::DimensionMismatch {
                what: "measurement configuration",
                expected: tree.n_active_joints(),
                got: self.q.len(),
            });
        }
        match self.kind {
            MeasurementKind::Contact => self
                .pair
                .ok_or_else(|| Error::Config("contact measurement without pair".into()))?
                .check(tree)?,
            MeasurementKind::Cartesian => {
                let e = self
                    .end_effector
                    .ok_or_else(|| Error::Config("cartesian measurement without end-effector".into()))?;
                tree.end_effector(e)?;
            }
            MeasurementKind::Task => {
                if let Some(s) = &self.scope {
                    if s.len() < 2 || s.windows(2).any(|w| w[0] >= w[1]) || s[s.len() - 1] >= n_ee {
                        return Err(Error::EmptyScope(format!("invalid task scope {s:?}")));
                    }
                }
            }
        }
        if self.y.len() != self.dim(n_ee) {
            return Err(Error::DimensionMismatch {
                what: "measurement value",
                expected: self.dim(n_ee),
                got: self.y.len(),
            });
        }
        Ok(())
    }
}

/// Tip positions relative to end-effector 0, stacked for `k = 1..N`.
pub fn h_task(tree: &KinematicTree, q: &Configuration) -> Result<DVector<f64>> {
    let all: Vec<usize> = (0..tree.n_end_effectors()).collect();
    h_task_scoped(tree, q, &all)
}

/// Task function restricted to `scope`, relative to `scope[0]`.
pub fn h_task_scoped(tree: &KinematicTree, q: &Configuration, scope: &[usize]) -> Result<DVector<f64>> {
    let Some((&base, rest)) = scope.split_first() else {
        return Err(Error::EmptyScope("task scope is empty".into()));
    };
    let p0 = tree.tip_frame(q, base)?.position;
    let mut out = DVector::zeros(3 * rest.len());
    for (i, &k) in rest.iter().enumerate() {
        let d = tree.tip_frame(q, k)?.position - p0;
        out.fixed_rows_mut::<3>(3 * i).copy_from(&d);
    }
    Ok(out)
}

/// Marker position in the camera frame: `T_c0 * f(q)_E * m_E`.
pub fn h_cartesian(
    tree: &KinematicTree,
    markers: &MarkerModel,
    q: &Configuration,
    ee: usize,
) -> Result<Vector3<f64>> {
    let tip = tree.tip_frame(q, ee)?;
    let m = markers
        .marker_offsets
        .get(ee)
        .ok_or(Error::InvalidEndEffector {
            index: ee,
            count: markers.marker_offsets.len(),
        })?;
    Ok(markers.camera_to_base.transform_point(&tip.transform_point(m)))
}

/// Signed distance between the two fingertip capsules of `pair`.
pub fn h_contact(tree: &KinematicTree, q: &Configuration, pair: BodyPair) -> Result<f64> {
    Ok(contact_details(tree, q, pair)?.signed_distance)
}

pub fn contact_details(tree: &KinematicTree, q: &Configuration, pair: BodyPair) -> Result<CapsuleContact> {
    pair.check(tree)?;
    let fk = tree.tip_frame(q, pair.k)?;
    let fl = tree.tip_frame(q, pair.l)?;
    let ek = tree.end_effector(pair.k)?;
    let el = tree.end_effector(pair.l)?;
    Ok(capsule_contact(&ek.capsule, &fk, &el.capsule, &fl))
}

/// Model prediction `h(q, Theta)` for one measurement.
pub fn predict(tree: &KinematicTree, m: &Measurement, markers: Option<&MarkerModel>) -> Result<DVector<f64>> {
    match m.kind {
        MeasurementKind::Task => match &m.scope {
            Some(s) => h_task_scoped(tree, &m.q, s),
            None => h_task(tree, &m.q),
        },
        MeasurementKind::Cartesian => {
            let markers =
                markers.ok_or_else(|| Error::Config("cartesian measurement needs a marker model".into()))?;
            let ee = m
                .end_effector
                .ok_or_else(|| Error::Config("cartesian measurement without end-effector".into()))?;
            let p = h_cartesian(tree, markers, &m.q, ee)?;
            Ok(DVector::from_column_slice(p.as_slice()))
        }
        MeasurementKind::Contact => {
            let pair = m
                .pair
                .ok_or_else(|| Error::Config("contact measurement without pair".into()))?;
            Ok(DVector::from_element(1, h_contact(tree, &m.q, pair)?))
        }
    }
}

/// Stacked predictions of all measurements.
pub fn stacked_predict(
    tree: &KinematicTree,
    ms: &[Measurement],
    markers: Option<&MarkerModel>,
) -> Result<DVector<f64>> {
    let parts = ms
        .iter()
        .map(|m| predict(tree, m, markers))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut row = 0;
    for p in parts {
        out.rows_mut(row, p.len()).copy_from(&p);
        row += p.len();
    }
    Ok(out)
}

/// Row offsets of each measurement in the stacked vector.
fn row_offsets(ms: &[Measurement], n_ee: usize) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(ms.len());
    let mut row = 0;
    for m in ms {
        offs.push(row);
        row += m.dim(n_ee);
    }
    (offs, row)
}

/// Central-difference Jacobian of one measurement (`dim x N_Theta`).
pub fn jacobian(
    tree: &KinematicTree,
    layout: &ParameterLayout,
    m: &Measurement,
    markers: Option<&MarkerModel>,
) -> Result<DMatrix<f64>> {
    stacked_jacobian(tree, layout, std::slice::from_ref(m), markers)
}

/// Central-difference Jacobian of all measurements, rows stacked in order.
///
/// Columns for parameters off a measurement's branches are exactly zero.
pub fn stacked_jacobian(
    tree: &KinematicTree,
    layout: &ParameterLayout,
    ms: &[Measurement],
    markers: Option<&MarkerModel>,
) -> Result<DMatrix<f64>> {
    let n_ee = tree.n_end_effectors();
    for m in ms {
        m.validate(tree)?;
    }
    if let Some(s) = layout.slots().iter().find(|s| s.link >= tree.links().len()) {
        return Err(Error::LayoutMismatch(format!("slot on missing link {}", s.link)));
    }
    let (offs, rows) = row_offsets(ms, n_ee);
    let ee_sets: Vec<Vec<usize>> = ms.iter().map(|m| m.end_effectors(n_ee)).collect();

    let columns = layout
        .slots()
        .par_iter()
        .map(|&slot| fd_column(tree, slot, ms, &ee_sets, &offs, rows, markers))
        .collect::<Result<Vec<_>>>()?;

    let mut jac = DMatrix::zeros(rows, layout.len());
    for (c, col) in columns.into_iter().enumerate() {
        jac.set_column(c, &col);
    }
    Ok(jac)
}

fn fd_column(
    tree: &KinematicTree,
    slot: ParamSlot,
    ms: &[Measurement],
    ee_sets: &[Vec<usize>],
    offs: &[usize],
    rows: usize,
    markers: Option<&MarkerModel>,
) -> Result<DVector<f64>> {
    let affected = tree.end_effectors_using(slot.link);
    let mut col = DVector::zeros(rows);
    if affected.is_empty() {
        return Ok(col);
    }
    let v = tree.links()[slot.link].dh.get(slot.field);
    let plus = tree.with_field(slot, v + FD_STEP);
    let minus = tree.with_field(slot, v - FD_STEP);
    for ((m, ees), &off) in ms.iter().zip(ee_sets).zip(offs) {
        if !ees.iter().any(|e| affected.contains(e)) {
            continue;
        }
        let p = predict(&plus, m, markers)?;
        let n = predict(&minus, m, markers)?;
        let d = (p - n) / (2.0 * FD_STEP);
        col.rows_mut(off, d.len()).copy_from(&d);
    }
    Ok(col)
}

/// Contact Jacobian through the chain rule: the witness direction dotted
/// with the parameter-Jacobians of the two body-fixed witness points.
///
/// Independent of [`stacked_jacobian`]'s route; valid away from parallel
/// axes where the witness points are unique.
pub fn contact_jacobian_via_witness(
    tree: &KinematicTree,
    layout: &ParameterLayout,
    q: &Configuration,
    pair: BodyPair,
) -> Result<DVector<f64>> {
    let c = contact_details(tree, q, pair)?;
    let sep = c.on_second - c.on_first;
    let n = sep / sep.norm();
    let fk = tree.tip_frame(q, pair.k)?;
    let fl = tree.tip_frame(q, pair.l)?;
    let local_k = fk.inverse().transform_point(&c.on_first);
    let local_l = fl.inverse().transform_point(&c.on_second);

    let mut out = DVector::zeros(layout.len());
    for (i, &slot) in layout.slots().iter().enumerate() {
        let v = tree.links()[slot.link].dh.get(slot.field);
        let plus = tree.with_field(slot, v + FD_STEP);
        let minus = tree.with_field(slot, v - FD_STEP);
        let point_rate = |ee: usize, local: &Vector3<f64>| -> Result<Vector3<f64>> {
            let a = plus.tip_frame(q, ee)?.transform_point(local);
            let b = minus.tip_frame(q, ee)?.transform_point(local);
            Ok((a - b) / (2.0 * FD_STEP))
        };
        let dk = point_rate(pair.k, &local_k)?;
        let dl = point_rate(pair.l, &local_l)?;
        out[i] = n.dot(&(dl - dk));
    }
    Ok(out)
}
