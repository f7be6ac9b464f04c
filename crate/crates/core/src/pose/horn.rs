use nalgebra::{DMatrix, Matrix3, Point3, Vector3};

use super::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};

/// Rank test: the second singular value of the centered source points must
/// exceed this fraction of the first.
const RANK_TOLERANCE: f64 = 1e-9;

/// Least-squares rigid fit of `src[i] -> tgt[i]`.
///
/// Centroid subtraction, SVD of the cross-covariance `H = U S V^T`, then
/// `R = V diag(1, 1, det(V U^T)) U^T` and `t = q_bar - R p_bar`.
pub fn horn_fit_points(src: &[Point3<f64>], tgt: &[Point3<f64>]) -> Result<RigidTransform> {
    assert_eq!(src.len(), tgt.len());
    let n = src.len();
    if n < 3 {
        return Err(Error::TooFewCorrespondences(n));
    }
    let inv_n = 1.0 / n as f64;
    let p_bar = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() * inv_n;
    let q_bar = tgt.iter().map(|q| q.coords).sum::<Vector3<f64>>() * inv_n;

    let centered = DMatrix::from_fn(n, 3, |i, j| src[i][j] - p_bar[j]);
    let sv = centered.singular_values();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] < RANK_TOLERANCE * sv[0] {
        return Err(Error::DegenerateConfiguration);
    }

    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(tgt) {
        h += (p.coords - p_bar) * (q.coords - q_bar).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = q_bar - rotation * p_bar;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Closed-form fit over the pairs of a correspondence set.
pub fn horn_fit(c: &CorrespondenceSet, src: &PointCloud, tgt: &PointCloud) -> Result<RigidTransform> {
    let (p, q) = gather(c, src, tgt)?;
    horn_fit_points(&p, &q)
}

pub(super) fn gather(
    c: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
) -> Result<(Vec<Point3<f64>>, Vec<Point3<f64>>)> {
    let mut p = Vec::with_capacity(c.len());
    let mut q = Vec::with_capacity(c.len());
    for pair in &c.pairs {
        match (src.points().get(pair.src), tgt.points().get(pair.tgt)) {
            (Some(a), Some(b)) => {
                p.push(*a);
                q.push(*b);
            }
            _ => {
                return Err(Error::DimensionMismatch(format!(
                    "correspondence ({}, {}) out of range for clouds of {} and {} points",
                    pair.src,
                    pair.tgt,
                    src.len(),
                    tgt.len()
                )))
            }
        }
    }
    Ok((p, q))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                )
            })
            .collect()
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::from_axis_angle(
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            rng.random_range(0.0..std::f64::consts::PI),
            Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        )
    }

    fn residual(t: &RigidTransform, p: &[Point3<f64>], q: &[Point3<f64>]) -> f64 {
        p.iter()
            .zip(q)
            .map(|(a, b)| (t.apply_point(a) - b).norm_squared())
            .sum()
    }

    #[test]
    fn copy_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let p = random_points(&mut rng, 20);
        let t = horn_fit_points(&p, &p).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() <= 1e-12);
        assert!(t.translation.norm() <= 1e-12);
    }

    #[test]
    fn recovers_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let gt = random_transform(&mut rng);
        let p = random_points(&mut rng, 10);
        let q: Vec<_> = p.iter().map(|x| gt.apply_point(x)).collect();
        let t = horn_fit_points(&p, &q).unwrap();
        assert!((t.rotation - gt.rotation).norm() <= 1e-9);
        assert!((t.translation - gt.translation).norm() <= 1e-9);
        assert!(t.is_valid());
    }

    #[test]
    fn planar_three_points_are_fine() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let gt = random_transform(&mut rng);
        let p = random_points(&mut rng, 3);
        let q: Vec<_> = p.iter().map(|x| gt.apply_point(x)).collect();
        let t = horn_fit_points(&p, &q).unwrap();
        assert!((t.rotation - gt.rotation).norm() <= 1e-9);
    }

    #[test]
    fn local_optimality() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let gt = random_transform(&mut rng);
        let p = random_points(&mut rng, 30);
        let q: Vec<_> = p
            .iter()
            .map(|x| {
                gt.apply_point(x)
                    + Vector3::new(
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                    )
            })
            .collect();
        let t = horn_fit_points(&p, &q).unwrap();
        let best = residual(&t, &p, &q);
        for _ in 0..100 {
            let delta = RigidTransform::from_axis_angle(
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                rng.random_range(1e-4..0.05),
                Vector3::new(
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                ),
            );
            assert!(residual(&delta.compose(&t), &p, &q) >= best);
        }
    }

    #[test]
    fn equivariant_under_common_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let gt = random_transform(&mut rng);
        let p = random_points(&mut rng, 15);
        let q: Vec<_> = p
            .iter()
            .map(|x| gt.apply_point(x) + Vector3::new(rng.random_range(-0.01..0.01), 0.0, 0.0))
            .collect();
        let base = horn_fit_points(&p, &q).unwrap();
        let rot = RigidTransform::from_axis_angle(Vector3::new(0.3, -1.0, 0.4), 1.1, Vector3::zeros());
        let p2: Vec<_> = p.iter().map(|x| rot.apply_point(x)).collect();
        let q2: Vec<_> = q.iter().map(|x| rot.apply_point(x)).collect();
        let t2 = horn_fit_points(&p2, &q2).unwrap();
        let qr = rot.rotation;
        assert!((t2.rotation - qr * base.rotation * qr.transpose()).norm() <= 1e-9);
        assert!((t2.translation - qr * base.translation).norm() <= 1e-9);
    }

    #[test]
    fn too_few_pairs() {
        let p = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            horn_fit_points(&p, &p),
            Err(Error::TooFewCorrespondences(2))
        ));
    }

    #[test]
    fn collinear_is_degenerate() {
        let p: Vec<_> = (0..6).map(|i| Point3::new(i as f64, 2.0 * i as f64, -(i as f64))).collect();
        assert!(matches!(horn_fit_points(&p, &p), Err(Error::DegenerateConfiguration)));
        let same = vec![Point3::new(1.0, 1.0, 1.0); 4];
        assert!(matches!(horn_fit_points(&same, &same), Err(Error::DegenerateConfiguration)));
    }

    #[test]
    fn out_of_range_indices() {
        let cloud = PointCloud::from(vec![[0.0, 0.0, 0.0]; 3]);
        let c = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1), (5, 2)]);
        assert!(matches!(horn_fit(&c, &cloud, &cloud), Err(Error::DimensionMismatch(_))));
    }
}
