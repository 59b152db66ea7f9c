//! Discrete brute-force validation of the feature-leakage interpretation:
//! the conditional-expectation estimator minimizes squared error, and on a
//! fixed-marginal family, lower mutual information goes with higher minimum
//! estimation error.
//!
//! Everything here works on small finite alphabets so each claim is exactly
//! checkable; no continuous entropy estimation is attempted.

use crate::error::{Error, Result};

/// Joint distribution of an embedding-valued variable `h` (finite support
/// of points in R^d) and a discrete observation `z`.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    /// Support of h: `n_h` points of dimension `d`.
    pub h_points: Vec<Vec<f64>>,
    /// Number of observation symbols.
    pub n_z: usize,
    /// Probability table, row-major `[i * n_z + j] = p(h_i, z_j)`.
    pub p: Vec<f64>,
}

/// A deterministic estimator: one vector in R^d per observation symbol.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub map: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(h_points: Vec<Vec<f64>>, n_z: usize, p: Vec<f64>) -> Result<DiscreteJoint> {
        if h_points.is_empty() || n_z == 0 {
            return Err(Error::invalid("support must be non-empty"));
        }
        let d = h_points[0].len();
        if d == 0 || h_points.iter().any(|h| h.len() != d) {
            return Err(Error::invalid("h points must share a positive dimension"));
        }
        if p.len() != h_points.len() * n_z {
            return Err(Error::invalid("probability table size mismatch"));
        }
        if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("probabilities must be non-negative"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(DiscreteJoint { h_points, n_z, p })
    }

    pub fn dim(&self) -> usize {
        self.h_points[0].len()
    }

    pub fn n_h(&self) -> usize {
        self.h_points.len()
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n_z + j]
    }

    pub fn z_marginal(&self, j: usize) -> f64 {
        (0..self.n_h()).map(|i| self.prob(i, j)).sum()
    }

    pub fn h_marginal(&self, i: usize) -> f64 {
        (0..self.n_z).map(|j| self.prob(i, j)).sum()
    }

    /// Mean of h under its marginal.
    pub fn h_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for i in 0..self.n_h() {
            let pi = self.h_marginal(i);
            for (m, v) in mean.iter_mut().zip(&self.h_points[i]) {
                *m += pi * v;
            }
        }
        mean
    }

    /// Total variance of h: `E |h - E h|^2`.
    pub fn h_variance(&self) -> f64 {
        let mean = self.h_mean();
        (0..self.n_h())
            .map(|i| self.h_marginal(i) * sq_dist(&self.h_points[i], &mean))
            .sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Expected squared estimation error of `est` under the joint.
pub fn estimator_risk(joint: &DiscreteJoint, est: &Estimator) -> Result<f64> {
    if est.map.len() != joint.n_z {
        return Err(Error::invalid(format!(
            "estimator covers {} symbols, joint has {}",
            est.map.len(),
            joint.n_z
        )));
    }
    if est.map.iter().any(|v| v.len() != joint.dim()) {
        return Err(Error::invalid("estimator dimension mismatch"));
    }
    let mut risk = 0.0;
    for i in 0..joint.n_h() {
        for j in 0..joint.n_z {
            let p = joint.prob(i, j);
            if p > 0.0 {
                risk += p * sq_dist(&est.map[j], &joint.h_points[i]);
            }
        }
    }
    Ok(risk)
}

/// The conditional-expectation estimator `z_j -> E[h | z_j]`.
pub fn optimal_estimator(joint: &DiscreteJoint) -> Result<Estimator> {
    let d = joint.dim();
    let mut map = Vec::with_capacity(joint.n_z);
    for j in 0..joint.n_z {
        let marginal = joint.z_marginal(j);
        if marginal <= 0.0 {
            return Err(Error::invalid(format!(
                "observation symbol {j} has zero marginal probability"
            )));
        }
        let mut v = vec![0.0; d];
        for i in 0..joint.n_h() {
            let w = joint.prob(i, j) / marginal;
            for (vv, h) in v.iter_mut().zip(&joint.h_points[i]) {
                *vv += w * h;
            }
        }
        map.push(v);
    }
    Ok(Estimator { map })
}

/// Minimum mean-squared error: risk of the conditional-expectation
/// estimator.
pub fn mmse(joint: &DiscreteJoint) -> Result<f64> {
    let est = optimal_estimator(joint)?;
    estimator_risk(joint, &est)
}

/// Mutual information between h and z, in bits.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let mut mi = 0.0;
    for i in 0..joint.n_h() {
        let ph = joint.h_marginal(i);
        for j in 0..joint.n_z {
            let p = joint.prob(i, j);
            if p > 0.0 {
                let pz = joint.z_marginal(j);
                mi += p * (p / (ph * pz)).log2();
            }
        }
    }
    mi
}

/// Anchors used by the demonstration family.
pub fn demo_anchors() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.0], vec![-1.0, 0.5]]
}

/// Fixed-marginal family: h uniform over two anchors, z the anchor index
/// passed through a symmetric channel with flip probability
/// `(1 - coupling) / 2`. The h marginal is uniform for every coupling.
pub fn demo_family_joint(coupling: f64) -> Result<DiscreteJoint> {
    if !(0.0..=1.0).contains(&coupling) {
        return Err(Error::invalid("coupling must lie in [0, 1]"));
    }
    let keep = (1.0 + coupling) / 4.0;
    let flip = (1.0 - coupling) / 4.0;
    DiscreteJoint::new(demo_anchors(), 2, vec![keep, flip, flip, keep])
}

/// One row of the leakage demonstration table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakagePoint {
    pub coupling: f64,
    pub mi_bits: f64,
    pub mmse: f64,
}

/// Tabulate mutual information and minimum estimation error across a
/// coupling grid of the demonstration family.
pub fn leakage_demo(couplings: &[f64]) -> Result<Vec<LeakagePoint>> {
    couplings
        .iter()
        .map(|&c| {
            let joint = demo_family_joint(c)?;
            Ok(LeakagePoint {
                coupling: c,
                mi_bits: mutual_information(&joint),
                mmse: mmse(&joint)?,
            })
        })
        .collect()
}

/// Default 11-point coupling grid from 0 to 1.
pub fn default_coupling_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}
