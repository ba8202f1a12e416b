//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use handcal::kinematics::{Configuration, JointKind, KinematicTree};
use handcal::measurement::{predict, MarkerModel, Measurement};
use handcal::oed::{log_d_optimality, CandidatePool};
use handcal::params::ParameterLayout;
use nalgebra::{DMatrix, DVector, Matrix4, Vector3};

/// Segment-segment distance by grid search over `(s, t)` with repeated
/// zooming around the best node. The squared distance is convex on the
/// unit square, so the zoom window always keeps the minimizer.
pub fn grid_segment_distance(p1: &Vector3<f64>, p2: &Vector3<f64>, p3: &Vector3<f64>, p4: &Vector3<f64>) -> f64 {
    let dist = |s: f64, t: f64| ((p1 + (p2 - p1) * s) - (p3 + (p4 - p3) * t)).norm();
    let n = 100;
    let (mut s_lo, mut s_hi, mut t_lo, mut t_hi) = (0.0, 1.0, 0.0, 1.0);
    let mut best = f64::INFINITY;
    for _ in 0..12 {
        let (ds, dt) = ((s_hi - s_lo) / n as f64, (t_hi - t_lo) / n as f64);
        let (mut bs, mut bt) = (s_lo, t_lo);
        for i in 0..=n {
            for j in 0..=n {
                let (s, t) = (s_lo + ds * i as f64, t_lo + dt * j as f64);
                let d = dist(s, t);
                if d < best {
                    best = d;
                    bs = s;
                    bt = t;
                }
            }
        }
        s_lo = (bs - 2.0 * ds).max(0.0);
        s_hi = (bs + 2.0 * ds).min(1.0);
        t_lo = (bt - 2.0 * dt).max(0.0);
        t_hi = (bt + 2.0 * dt).min(1.0);
    }
    best
}

fn rot_x(a: f64) -> Matrix4<f64> {
    let (s, c) = a.sin_cos();
    Matrix4::new(1.0, 0.0, 0.0, 0.0, 0.0, c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0)
}

fn rot_z(a: f64) -> Matrix4<f64> {
    let (s, c) = a.sin_cos();
    Matrix4::new(c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
}

fn trans(x: f64, y: f64, z: f64) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m[(0, 3)] = x;
    m[(1, 3)] = y;
    m[(2, 3)] = z;
    m
}

fn oracle_joint_value(tree: &KinematicTree, link: usize, q: &Configuration) -> f64 {
    match tree.links()[link].dh.joint {
        JointKind::Revolute | JointKind::Prismatic => q.0[tree.config_index(link).unwrap()],
        JointKind::Fixed => 0.0,
        JointKind::PassiveCoupled { source, ratio } => ratio * oracle_joint_value(tree, source, q),
    }
}

/// Homogeneous product `Rx(alpha) Tx(r) Rz(theta) Tz(d)` along the branch.
pub fn matrix_chain_tip(tree: &KinematicTree, q: &Configuration, ee: usize) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for &l in &tree.end_effectors()[ee].branch {
        let dh = tree.links()[l].dh;
        let v = oracle_joint_value(tree, l, q);
        let (theta, d) = match dh.joint {
            JointKind::Prismatic => (dh.theta, dh.d + v),
            _ => (dh.theta + v, dh.d),
        };
        m = m * rot_x(dh.alpha) * trans(dh.r, 0.0, 0.0) * rot_z(theta) * trans(0.0, 0.0, d);
    }
    m
}

/// Richardson-extrapolated central differences of `predict` with respect to
/// the layout's parameters.
pub fn richardson_jacobian(
    tree: &KinematicTree,
    layout: &ParameterLayout,
    m: &Measurement,
    markers: Option<&MarkerModel>,
    h: f64,
) -> DMatrix<f64> {
    let theta = tree.parameters(layout).unwrap();
    let x0 = theta.values().clone();
    let eval = |x: &DVector<f64>| predict(&tree.with_values(layout, x.as_slice()).unwrap(), m, markers).unwrap();
    let rows = eval(&x0).len();
    let mut j = DMatrix::zeros(rows, layout.len());
    for c in 0..layout.len() {
        let central = |step: f64| {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[c] += step;
            xm[c] -= step;
            (eval(&xp) - eval(&xm)) / (2.0 * step)
        };
        let d1 = central(h);
        let d2 = central(h / 2.0);
        j.set_column(c, &((d2 * 4.0 - d1) / 3.0));
    }
    j
}

/// Closed-form minimizer of `|W^(1/2) (y - A x)|^2 + (x - mu)^T P (x - mu)`.
pub fn ridge_solution(a: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, mu: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
    let aw = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * w[i]);
    let lhs = a.transpose() * &aw + DMatrix::from_diagonal(p);
    let rhs = aw.transpose() * y + p.component_mul(mu);
    lhs.lu().solve(&rhs).unwrap()
}

fn combinations(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if cur.len() == k {
        f(cur);
        return;
    }
    for i in start..n {
        if n - i < k - cur.len() {
            break;
        }
        cur.push(i);
        combinations(n, k, i + 1, cur, f);
        cur.pop();
    }
}

/// Lowest log O_D over every subset of size `k`.
pub fn exhaustive_best(pool: &CandidatePool, k: usize) -> f64 {
    let mut best = f64::INFINITY;
    combinations(pool.len(), k, 0, &mut Vec::new(), &mut |s| {
        best = best.min(log_d_optimality(pool, s).unwrap());
    });
    best
}

/// Index of the first of `n + 1` uniform samples of `[0, 1]` where `f <= 0`.
pub fn first_nonpositive(n: usize, f: impl Fn(f64) -> f64) -> Option<usize> {
    (0..=n).find(|&i| f(i as f64 / n as f64) <= 0.0)
}
