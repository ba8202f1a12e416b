//! Calibration parameter layouts and vectors.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::DhField;

/// One calibrated scalar: a DH field of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamSlot {
    pub link: usize,
    pub field: DhField,
}

impl ParamSlot {
    pub fn is_rotational(&self) -> bool {
        self.field.is_rotational()
    }
}

/// Ordered mapping from parameter entries to `(link, field)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterLayout {
    slots: Vec<ParamSlot>,
}

impl ParameterLayout {
    pub fn new(slots: Vec<ParamSlot>) -> Self {
        ParameterLayout { slots }
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn position(&self, slot: ParamSlot) -> Option<usize> {
        self.slots.iter().position(|s| *s == slot)
    }

    /// Keeps only slots on the given links (which must be sorted).
    pub fn restrict_to_links(&self, links: &[usize]) -> ParameterLayout {
        ParameterLayout {
            slots: self
                .slots
                .iter()
                .filter(|s| links.binary_search(&s.link).is_ok())
                .copied()
                .collect(),
        }
    }

    /// Column scale per entry: `1` for angles, `length_scale` for lengths.
    pub fn column_scales(&self, length_scale: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.slots.len(),
            self.slots
                .iter()
                .map(|s| if s.is_rotational() { 1.0 } else { length_scale }),
        )
    }
}

/// Parameter values together with their Gaussian prior.
///
/// `prior_sigma` entries may be `+inf`, which removes the prior on that entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    layout: ParameterLayout,
    values: DVector<f64>,
    prior_mean: DVector<f64>,
    prior_sigma: DVector<f64>,
}

impl ParameterVector {
    pub fn new(
        layout: ParameterLayout,
        values: Vec<f64>,
        prior_mean: Vec<f64>,
        prior_sigma: Vec<f64>,
    ) -> Result<Self> {
        let n = layout.len();
        for (what, len) in [
            ("values", values.len()),
            ("prior mean", prior_mean.len()),
            ("prior sigma", prior_sigma.len()),
        ] {
            if len != n {
                return Err(Error::LayoutMismatch(format!(
                    "{what} has {len} entries, layout has {n}"
                )));
            }
        }
        if prior_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::LayoutMismatch("prior sigma must be positive".into()));
        }
        Ok(ParameterVector {
            layout,
            values: DVector::from_vec(values),
            prior_mean: DVector::from_vec(prior_mean),
            prior_sigma: DVector::from_vec(prior_sigma),
        })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_sigma(&self) -> &DVector<f64> {
        &self.prior_sigma
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: DVector<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter values",
                expected: self.len(),
                got: values.len(),
            });
        }
        Ok(ParameterVector {
            values,
            ..self.clone()
        })
    }

    pub fn with_prior_sigma(&self, sigma: DVector<f64>) -> Result<Self> {
        ParameterVector::new(
            self.layout.clone(),
            self.values.as_slice().to_vec(),
            self.prior_mean.as_slice().to_vec(),
            sigma.as_slice().to_vec(),
        )
    }

    /// `Theta - Theta_p`.
    pub fn delta(&self) -> DVector<f64> {
        &self.values - &self.prior_mean
    }

    /// `sigma_p^-2` per entry (zero where the prior is infinite).
    pub fn prior_precision(&self) -> DVector<f64> {
        self.prior_sigma.map(|s| if s.is_finite() { 1.0 / (s * s) } else { 0.0 })
    }
}
