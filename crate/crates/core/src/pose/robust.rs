//! Hypothesize-and-verify registration ranked by second-order spatial
//! compatibility.
//!
//! Two correspondences `a`, `b` are compatible when the rigid-motion
//! invariant `| |p_a - p_b| - |q_a - q_b| |` is at most `d_comp`. The
//! second-order score of a compatible pair counts the correspondences
//! compatible with both; a correspondence's seed score is the sum over its
//! row. Top seeds grow 3-point hypotheses from their best-scored compatible
//! neighbors, and the hypothesis with the most residual inliers wins.

use nalgebra::Point3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::horn::{gather, horn_fit_points};
use super::{CorrespondenceSet, RegistrationResult};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustConfig {
    /// Pairwise length-consistency threshold (meters).
    pub d_comp: f64,
    /// Residual threshold for counting a correspondence as inlier (meters).
    pub d_inlier: f64,
    pub hypotheses: usize,
    /// Number of top-ranked seeds that generate hypotheses.
    pub seeds: usize,
    /// Compatible neighbors per seed that hypotheses are sampled from.
    pub neighbors: usize,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self::for_voxel(0.025)
    }
}

impl RobustConfig {
    /// Thresholds at twice the voxel size.
    pub fn for_voxel(voxel: f64) -> Self {
        Self {
            d_comp: 2.0 * voxel,
            d_inlier: 2.0 * voxel,
            hypotheses: 1000,
            seeds: 100,
            neighbors: 20,
            min_inliers: 10,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_comp > 0.0 && self.d_inlier > 0.0) {
            return Err(Error::InvalidParameter(
                "d_comp and d_inlier must be positive".into(),
            ));
        }
        if self.hypotheses == 0 || self.seeds == 0 || self.neighbors < 2 {
            return Err(Error::InvalidParameter(
                "need hypotheses >= 1, seeds >= 1 and neighbors >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Dense symmetric bit matrix.
struct BitMatrix {
    words: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    fn get(&self, i: usize, j: usize) -> bool {
        self.row(i)[j / 64] >> (j % 64) & 1 == 1
    }

    fn common(&self, i: usize, j: usize) -> u32 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }
}

fn compatibility(p: &[Point3<f64>], q: &[Point3<f64>], d_comp: f64) -> BitMatrix {
    let m = p.len();
    let words = m.div_ceil(64);
    let mut bits = vec![0u64; m * words];
    bits.par_chunks_mut(words.max(1))
        .take(m)
        .enumerate()
        .for_each(|(a, row)| {
            for b in 0..m {
                if a != b && ((p[a] - p[b]).norm() - (q[a] - q[b]).norm()).abs() <= d_comp {
                    row[b / 64] |= 1 << (b % 64);
                }
            }
        });
    BitMatrix { words, bits }
}

fn count_inliers(t: &RigidTransform, p: &[Point3<f64>], q: &[Point3<f64>], d: f64) -> Vec<usize> {
    p.iter()
        .zip(q)
        .enumerate()
        .filter(|(_, (a, b))| (t.apply_point(a) - *b).norm() <= d)
        .map(|(i, _)| i)
        .collect()
}

/// Robust rigid registration over a putative correspondence set.
///
/// Fails with [`Error::RegistrationFailed`] when no hypothesis reaches
/// `min_inliers`.
pub fn robust_register(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &RobustConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if c.len() < 3 {
        return Err(Error::TooFewCorrespondences(c.len()));
    }
    let (p, q) = gather(c, src, tgt)?;
    let m = p.len();
    let compat = compatibility(&p, &q, cfg.d_comp);

    // second-order scores of compatible pairs, and per-correspondence totals
    let sc2_rows: Vec<Vec<(usize, u32)>> = (0..m)
        .into_par_iter()
        .map(|a| {
            (0..m)
                .filter(|&b| compat.get(a, b))
                .map(|b| (b, compat.common(a, b)))
                .collect()
        })
        .collect();
    let mut ranked: Vec<(usize, u64)> = sc2_rows
        .iter()
        .enumerate()
        .map(|(a, row)| (a, row.iter().map(|&(_, s)| s as u64).sum()))
        .filter(|&(_, s)| s > 0)
        .collect();
    ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.truncate(cfg.seeds);

    let neighborhoods: Vec<(usize, Vec<usize>)> = ranked
        .iter()
        .map(|&(seed, _)| {
            let mut nb = sc2_rows[seed].clone();
            nb.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
            (seed, nb.into_iter().take(cfg.neighbors).map(|(b, _)| b).collect())
        })
        .filter(|(_, nb): &(usize, Vec<usize>)| nb.len() >= 2)
        .collect();
    if neighborhoods.is_empty() {
        return Err(Error::RegistrationFailed(format!(
            "no seed among {m} correspondences has two compatible neighbors"
        )));
    }

    // draw all samples up front so the outcome does not depend on scheduling
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let samples: Vec<[usize; 3]> = (0..cfg.hypotheses)
        .map(|h| {
            let (seed, nb) = &neighborhoods[h % neighborhoods.len()];
            let pick = sample(&mut rng, nb.len(), 2);
            [*seed, nb[pick.index(0)], nb[pick.index(1)]]
        })
        .collect();

    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(h, idx)| {
            let sp: Vec<_> = idx.iter().map(|&i| p[i]).collect();
            let sq: Vec<_> = idx.iter().map(|&i| q[i]).collect();
            let t = horn_fit_points(&sp, &sq).ok()?;
            Some((h, count_inliers(&t, &p, &q, cfg.d_inlier).len()))
        })
        .reduce_with(|a, b| {
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                b
            } else {
                a
            }
        });

    let Some((h, count)) = best else {
        return Err(Error::RegistrationFailed(
            "every sampled hypothesis was degenerate".into(),
        ));
    };
    if count < cfg.min_inliers.max(3) {
        return Err(Error::RegistrationFailed(format!(
            "best hypothesis has {count} inliers, need {}",
            cfg.min_inliers
        )));
    }

    let idx = samples[h];
    let seed_fit = horn_fit_points(
        &idx.iter().map(|&i| p[i]).collect::<Vec<_>>(),
        &idx.iter().map(|&i| q[i]).collect::<Vec<_>>(),
    )?;
    let inliers = count_inliers(&seed_fit, &p, &q, cfg.d_inlier);
    let transform = horn_fit_points(
        &inliers.iter().map(|&i| p[i]).collect::<Vec<_>>(),
        &inliers.iter().map(|&i| q[i]).collect::<Vec<_>>(),
    )?;
    let inlier_indices = count_inliers(&transform, &p, &q, cfg.d_inlier);
    Ok(RegistrationResult {
        transform,
        inlier_indices,
        rre: None,
        rte: None,
    })
}
