//! Correspondence extraction, closed-form rigid fitting, robust estimation
//! and registration error metrics.

mod horn;
mod robust;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use horn::{horn_fit, horn_fit_points};
pub use robust::{robust_register, RobustConfig};

use crate::geometry::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: usize,
    pub tgt: usize,
    pub confidence: f64,
}

/// A partial injection from source to target indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Builds an unweighted set from `(src, tgt)` index pairs.
    pub fn from_index_pairs(pairs: &[(usize, usize)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|&(src, tgt)| Correspondence {
                    src,
                    tgt,
                    confidence: 1.0,
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Positions (into the input correspondence set) of the final inliers.
    pub inlier_indices: Vec<usize>,
    pub rre: Option<f64>,
    pub rte: Option<f64>,
}

impl RegistrationResult {
    /// Fills `rre` / `rte` against a ground-truth transform.
    pub fn with_ground_truth(mut self, gt: &RigidTransform) -> Self {
        self.rre = Some(rre(&self.transform.rotation, &gt.rotation));
        self.rte = Some(rte(&self.transform.translation, &gt.translation));
        self
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Keeps `(i, j)` when `j` is the row argmax of `i` and `i` the column
/// argmax of `j`. Ties go to the lowest index.
pub fn mutual_nn_match(p: &Array2<f64>) -> CorrespondenceSet {
    let (rows, cols) = p.dim();
    if rows == 0 || cols == 0 {
        return CorrespondenceSet::default();
    }
    let row_best: Vec<usize> = p
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|r| argmax(r.iter().copied()).unwrap())
        .collect();
    let col_best: Vec<usize> = p
        .axis_iter(Axis(1))
        .into_par_iter()
        .map(|c| argmax(c.iter().copied()).unwrap())
        .collect();
    let pairs = row_best
        .iter()
        .enumerate()
        .filter(|&(i, &j)| col_best[j] == i)
        .map(|(i, &j)| Correspondence {
            src: i,
            tgt: j,
            confidence: p[[i, j]],
        })
        .collect();
    CorrespondenceSet { pairs }
}

/// Relative rotation error in degrees: the angle of `R_gt^T R_est`.
///
/// Uses `atan2(sin, cos)` rather than `acos((tr - 1) / 2)`, which loses
/// about half the significant digits for small angles.
pub fn rre(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let r = r_gt.transpose() * r_est;
    let cos = (r.trace() - 1.0) / 2.0;
    let sin = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

/// Relative translation error in meters.
pub fn rte(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_est - t_gt).norm()
}
