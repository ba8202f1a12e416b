//! Fingertip capsules and their signed distance.

use std::cmp::Ordering;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Frame;

/// Segment plus radius, expressed in the owning end-effector frame.
/// Coincident endpoints give a sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Result<Self> {
        let c = Capsule { a, b, radius };
        c.validate()?;
        Ok(c)
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self> {
        Self::new(center, center, radius)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidModel(format!(
                "capsule radius must be positive, got {}",
                self.radius
            )));
        }
        if !self.a.iter().chain(self.b.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidModel("capsule endpoints must be finite".into()));
        }
        Ok(())
    }

    /// World-space segment endpoints under `frame`.
    pub fn segment_in(&self, frame: &Frame) -> (Vector3<f64>, Vector3<f64>) {
        (frame.transform_point(&self.a), frame.transform_point(&self.b))
    }
}

/// Closest points between two closed segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentDistance {
    pub distance: f64,
    /// Closest point on `[p1, p2]`.
    pub on_first: Vector3<f64>,
    /// Closest point on `[p3, p4]`.
    pub on_second: Vector3<f64>,
    /// Segment parameters of the witness points.
    pub s: f64,
    pub t: f64,
    /// True when the segment directions were treated as parallel.
    pub parallel: bool,
}

const DEGENERATE_SQ: f64 = 1e-24;
const PARALLEL_REL: f64 = 1e-12;

/// Distance between `[p1, p2]` and `[p3, p4]` with witness points.
///
/// Clamped quadratic minimization with explicit handling of point-point,
/// point-segment and parallel cases. Parallel ties resolve to the smallest
/// parameter on the first segment.
pub fn segment_segment_distance(
    p1: &Vector3<f64>,
    p2: &Vector3<f64>,
    p3: &Vector3<f64>,
    p4: &Vector3<f64>,
) -> SegmentDistance {
    let d1 = p2 - p1;
    let d2 = p4 - p3;
    let r = p1 - p3;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);

    let mut parallel = false;
    let (s, t) = if a <= DEGENERATE_SQ && e <= DEGENERATE_SQ {
        (0.0, 0.0)
    } else if a <= DEGENERATE_SQ {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= DEGENERATE_SQ {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > PARALLEL_REL * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                parallel = true;
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };

    let c1 = p1 + d1 * s;
    let c2 = p3 + d2 * t;
    SegmentDistance {
        distance: (c1 - c2).norm(),
        on_first: c1,
        on_second: c2,
        s,
        t,
        parallel,
    }
}

fn lex_cmp(a: &[&Vector3<f64>; 2], b: &[&Vector3<f64>; 2]) -> Ordering {
    a.iter()
        .flat_map(|v| v.iter())
        .zip(b.iter().flat_map(|v| v.iter()))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Signed distance between two capsules with its witness points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleContact {
    /// Segment distance minus the radii; negative in penetration.
    pub signed_distance: f64,
    /// Closest axis points on the first and second capsule (world frame).
    pub on_first: Vector3<f64>,
    pub on_second: Vector3<f64>,
    /// Sine of the angle between the two axes (1 for degenerate axes).
    pub axis_sin: f64,
    pub parallel: bool,
}

/// Signed distance with witness points. Evaluation order is canonicalized
/// so swapping the arguments gives bit-identical distances.
pub fn capsule_contact(c1: &Capsule, f1: &Frame, c2: &Capsule, f2: &Frame) -> CapsuleContact {
    let (a1, b1) = c1.segment_in(f1);
    let (a2, b2) = c2.segment_in(f2);
    let swap = lex_cmp(&[&a1, &b1], &[&a2, &b2]) == Ordering::Greater;
    let sd = if swap {
        segment_segment_distance(&a2, &b2, &a1, &b1)
    } else {
        segment_segment_distance(&a1, &b1, &a2, &b2)
    };
    let (on_first, on_second) = if swap {
        (sd.on_second, sd.on_first)
    } else {
        (sd.on_first, sd.on_second)
    };
    let u = b1 - a1;
    let v = b2 - a2;
    let axis_sin = if u.norm() < 1e-12 || v.norm() < 1e-12 {
        1.0
    } else {
        u.cross(&v).norm() / (u.norm() * v.norm())
    };
    CapsuleContact {
        signed_distance: sd.distance - (c1.radius + c2.radius),
        on_first,
        on_second,
        axis_sin,
        parallel: sd.parallel,
    }
}

/// Segment distance of the world-placed capsules minus the sum of radii.
pub fn capsule_signed_distance(c1: &Capsule, f1: &Frame, c2: &Capsule, f2: &Frame) -> f64 {
    capsule_contact(c1, f1, c2, f2).signed_distance
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn identical_points() {
        let p = v(0.3, -0.1, 2.0);
        assert_eq!(segment_segment_distance(&p, &p, &p, &p).distance, 0.0);
    }

    #[test]
    fn parallel_offset_segments() {
        let d = segment_segment_distance(
            &v(0.0, 0.0, 0.0),
            &v(1.0, 0.0, 0.0),
            &v(0.0, 1.0, 0.0),
            &v(1.0, 1.0, 0.0),
        );
        assert!((d.distance - 1.0).abs() < 1e-15);
        assert!(d.parallel);
        assert_eq!(d.s, 0.0);
    }

    #[test]
    fn point_to_segment() {
        let d = segment_segment_distance(
            &v(0.5, 2.0, 0.0),
            &v(0.5, 2.0, 0.0),
            &v(0.0, 0.0, 0.0),
            &v(1.0, 0.0, 0.0),
        );
        assert!((d.distance - 2.0).abs() < 1e-15);
        assert!((d.t - 0.5).abs() < 1e-15);
    }

    #[test]
    fn crossing_segments_touch() {
        let d = segment_segment_distance(
            &v(-1.0, 0.0, 0.0),
            &v(1.0, 0.0, 0.0),
            &v(0.0, -1.0, 0.0),
            &v(0.0, 1.0, 0.0),
        );
        assert!(d.distance < 1e-15);
    }

    #[test]
    fn sphere_cases() {
        let s1 = Capsule::sphere(v(0.0, 0.0, 0.0), 1.0).unwrap();
        let s2 = Capsule::sphere(v(0.0, 0.0, 0.0), 1.0).unwrap();
        let f2 = Frame::translation(v(3.0, 0.0, 0.0));
        assert!((capsule_signed_distance(&s1, &Frame::identity(), &s2, &f2) - 1.0).abs() < 1e-15);
        let t1 = Capsule::sphere(v(0.0, 0.0, 0.0), 0.01).unwrap();
        let d = capsule_signed_distance(&t1, &Frame::identity(), &t1, &Frame::identity());
        assert!((d + 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_radius() {
        assert!(Capsule::new(v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), 0.0).is_err());
        assert!(Capsule::new(v(0.0, 0.0, 0.0), v(f64::NAN, 0.0, 0.0), 1.0).is_err());
    }

    fn arb_vec() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| v(x, y, z))
    }

    proptest! {
        #[test]
        fn symmetric_exactly(a1 in arb_vec(), b1 in arb_vec(), a2 in arb_vec(), b2 in arb_vec(),
                             r1 in 0.001..0.1f64, r2 in 0.001..0.1f64,
                             t in arb_vec(), ang in -3.0..3.0f64) {
            let c1 = Capsule::new(a1, b1, r1).unwrap();
            let c2 = Capsule::new(a2, b2, r2).unwrap();
            let f1 = Frame::identity();
            let f2 = Frame::translation(t).compose(&Frame::rot_z(ang));
            prop_assert_eq!(
                capsule_signed_distance(&c1, &f1, &c2, &f2),
                capsule_signed_distance(&c2, &f2, &c1, &f1)
            );
        }

        #[test]
        fn one_lipschitz_in_translation(a1 in arb_vec(), b1 in arb_vec(), a2 in arb_vec(), b2 in arb_vec(),
                                        dir in arb_vec(), step in 0.0..0.2f64) {
            let c1 = Capsule::new(a1, b1, 0.01).unwrap();
            let c2 = Capsule::new(a2, b2, 0.02).unwrap();
            let f = Frame::identity();
            let g = Frame::translation(dir * step);
            let d0 = capsule_signed_distance(&c1, &f, &c2, &f);
            let d1 = capsule_signed_distance(&c1, &f, &c2, &g);
            prop_assert!((d1 - d0).abs() <= (dir * step).norm() + 1e-12);
        }

        #[test]
        fn degenerate_reduces_to_spheres(p in arb_vec(), q in arb_vec(), r1 in 0.01..0.5f64, r2 in 0.01..0.5f64) {
            let c1 = Capsule::sphere(p, r1).unwrap();
            let c2 = Capsule::sphere(q, r2).unwrap();
            let d = capsule_signed_distance(&c1, &Frame::identity(), &c2, &Frame::identity());
            prop_assert!((d - ((p - q).norm() - r1 - r2)).abs() < 1e-14);
        }
    }
}
