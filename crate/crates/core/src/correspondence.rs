//! Cosine similarity matrices and temperature-softmax match posteriors.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::features::{Branch, FeatureField, ViewFeatureStack};

/// Temperature used for both branches unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub branch: Branch,
}

/// Row-stochastic `N_src x N_tgt` match probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    values: Array2<f64>,
    tau: f64,
}

impl PosteriorMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Replaces the rows of points flagged `false` with the uniform
    /// distribution `1 / N_tgt`, i.e. "no evidence" for that source point.
    pub fn with_uniform_rows(mut self, covered: &[bool]) -> Result<Self> {
        let (rows, cols) = self.values.dim();
        if covered.len() != rows {
            return Err(Error::DimensionMismatch(format!(
                "coverage mask has {} entries for {rows} rows",
                covered.len()
            )));
        }
        let uniform = 1.0 / cols as f64;
        for (mut row, &c) in self.values.axis_iter_mut(Axis(0)).zip(covered) {
            if !c {
                row.fill(uniform);
            }
        }
        Ok(self)
    }
}

fn to_f64(a: ArrayView2<'_, f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

/// `S = F_src F_tgt^T` accumulated in double precision.
pub fn similarity_geo(src: &FeatureField, tgt: &FeatureField) -> Result<SimilarityMatrix> {
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch(format!(
            "descriptor dimensions differ: {} vs {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let values = to_f64(src.descriptors().view()).dot(&to_f64(tgt.descriptors().view()).t());
    Ok(SimilarityMatrix {
        values,
        branch: Branch::Geo,
    })
}

/// Per-pair maximum over the `K^2` view slices of `F_src,k F_tgt,k^T`.
pub fn similarity_img_maxpool(
    src: &ViewFeatureStack,
    tgt: &ViewFeatureStack,
) -> Result<SimilarityMatrix> {
    if src.views() != tgt.views() {
        return Err(Error::DimensionMismatch(format!(
            "view counts differ: {} vs {}",
            src.views(),
            tgt.views()
        )));
    }
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch(format!(
            "descriptor dimensions differ: {} vs {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let mut values = Array2::from_elem((src.len(), tgt.len()), f64::NEG_INFINITY);
    for k in 0..src.views() {
        let s = to_f64(src.view(k)).dot(&to_f64(tgt.view(k)).t());
        Zip::from(&mut values).and(&s).par_for_each(|acc, &v| {
            if v > *acc {
                *acc = v;
            }
        });
    }
    Ok(SimilarityMatrix {
        values,
        branch: Branch::Img,
    })
}

/// Row-wise `softmax(S / tau)` with max subtraction.
pub fn posterior_softmax(s: &SimilarityMatrix, tau: f64) -> Result<PosteriorMatrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut values = s.values.clone();
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(|mut row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| ((v - max) / tau).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        });
    Ok(PosteriorMatrix { values, tau })
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::features::{l2_normalize_rows, l2_normalize_stack};

    fn random_unit_field(rng: &mut impl Rng, n: usize, d: usize) -> FeatureField {
        let raw = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0));
        l2_normalize_rows(&FeatureField::new(raw).unwrap())
    }

    fn sim(values: Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix {
            values,
            branch: Branch::Geo,
        }
    }

    /// Naive triple loop in f64.
    fn naive_dot(a: &FeatureField, b: &FeatureField) -> Array2<f64> {
        let mut out = Array2::zeros((a.len(), b.len()));
        for i in 0..a.len() {
            for j in 0..b.len() {
                let mut acc = 0.0;
                for k in 0..a.dim() {
                    acc += a.descriptors()[[i, k]] as f64 * b.descriptors()[[j, k]] as f64;
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    #[test]
    fn orthonormal_fields_give_identity() {
        let f = FeatureField::new(Array2::eye(4)).unwrap();
        assert_eq!(similarity_geo(&f, &f).unwrap().values, Array2::<f64>::eye(4));
    }

    #[test]
    fn orthogonal_rows_give_zero() {
        let a = FeatureField::new(array![[1.0f32, 0.0]]).unwrap();
        let b = FeatureField::new(array![[0.0f32, 1.0]]).unwrap();
        assert_eq!(similarity_geo(&a, &b).unwrap().values[[0, 0]], 0.0);
    }

    #[test]
    fn geo_matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_unit_field(&mut rng, 8, 16);
        let b = random_unit_field(&mut rng, 8, 16);
        let s = similarity_geo(&a, &b).unwrap();
        let oracle = naive_dot(&a, &b);
        for (x, y) in s.values.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-6);
            assert!(x.abs() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn geo_dimension_mismatch() {
        assert!(similarity_geo(&FeatureField::zeros(2, 3), &FeatureField::zeros(2, 4)).is_err());
    }

    #[test]
    fn single_view_equals_geo() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = random_unit_field(&mut rng, 6, 5);
        let b = random_unit_field(&mut rng, 7, 5);
        let sa = ViewFeatureStack::from_views(1, &[a.clone()]).unwrap();
        let sb = ViewFeatureStack::from_views(1, &[b.clone()]).unwrap();
        assert_eq!(
            similarity_img_maxpool(&sa, &sb).unwrap().values,
            similarity_geo(&a, &b).unwrap().values
        );
    }

    #[test]
    fn maxpool_picks_best_view() {
        // one 2-d point per side; view 2 gives 0.9, the others 0.1
        let c = |s: f32| (1.0 - s * s).sqrt();
        let mut src = Array3::zeros((4, 1, 2));
        let mut tgt = Array3::zeros((4, 1, 2));
        for k in 0..4 {
            let s = if k == 2 { 0.9 } else { 0.1 };
            src[[k, 0, 0]] = 1.0;
            tgt[[k, 0, 0]] = s;
            tgt[[k, 0, 1]] = c(s);
        }
        let s = similarity_img_maxpool(
            &ViewFeatureStack::new(2, src).unwrap(),
            &ViewFeatureStack::new(2, tgt).unwrap(),
        )
        .unwrap();
        assert!((s.values[[0, 0]] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn maxpool_matches_per_view_oracle_and_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let views_a: Vec<_> = (0..4).map(|_| random_unit_field(&mut rng, 10, 8)).collect();
        let views_b: Vec<_> = (0..4).map(|_| random_unit_field(&mut rng, 12, 8)).collect();
        let s = similarity_img_maxpool(
            &ViewFeatureStack::from_views(2, &views_a).unwrap(),
            &ViewFeatureStack::from_views(2, &views_b).unwrap(),
        )
        .unwrap();
        let per_view: Vec<_> = views_a.iter().zip(&views_b).map(|(a, b)| naive_dot(a, b)).collect();
        for i in 0..10 {
            for j in 0..12 {
                let oracle = per_view.iter().map(|m| m[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
                assert!((s.values[[i, j]] - oracle).abs() <= 1e-6);
                for m in &per_view {
                    assert!(s.values[[i, j]] >= m[[i, j]] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_view_mismatch() {
        let a = ViewFeatureStack::new(1, Array3::zeros((1, 2, 3))).unwrap();
        let b = ViewFeatureStack::new(2, Array3::zeros((4, 2, 3))).unwrap();
        assert!(matches!(
            similarity_img_maxpool(&a, &b),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn normalized_stack_similarities_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let raw = Array3::from_shape_fn((4, 9, 6), |_| rng.random_range(-3.0f32..3.0));
        let st = l2_normalize_stack(&ViewFeatureStack::new(2, raw).unwrap());
        let s = similarity_img_maxpool(&st, &st).unwrap();
        assert!(s.values.iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn constant_row_is_uniform() {
        let p = posterior_softmax(&sim(array![[0.3, 0.3, 0.3, 0.3]]), 0.1).unwrap();
        for v in p.values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_entry_row_at_tau_point_one() {
        let p = posterior_softmax(&sim(array![[1.0, 0.0]]), 0.1).unwrap();
        // independent scalar evaluation: e^10 / (e^10 + 1)
        let e10 = 10f64.exp();
        let expected = [e10 / (e10 + 1.0), 1.0 / (e10 + 1.0)];
        assert!((p.values()[[0, 0]] - expected[0]).abs() < 1e-15);
        assert!((p.values()[[0, 1]] - expected[1]).abs() < 1e-15);
        assert!((p.values()[[0, 0]] - 0.9999546).abs() < 1e-7);
        assert!((p.values()[[0, 1]] - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn high_temperature_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let s = Array2::from_shape_fn((5, 20), |_| rng.random_range(-1.0..1.0));
        let p = posterior_softmax(&sim(s), 1e6).unwrap();
        assert!(p.values().iter().all(|v| (v - 0.05).abs() < 1e-5));
    }

    #[test]
    fn rejects_bad_temperature() {
        let s = sim(array![[1.0]]);
        assert!(posterior_softmax(&s, 0.0).is_err());
        assert!(posterior_softmax(&s, -1.0).is_err());
        assert!(posterior_softmax(&s, f64::NAN).is_err());
    }

    #[test]
    fn uniform_rows_for_uncovered_points() {
        let p = posterior_softmax(&sim(array![[1.0, 0.0], [0.0, 1.0]]), 0.1)
            .unwrap()
            .with_uniform_rows(&[true, false])
            .unwrap();
        assert_eq!(p.values().row(1).to_vec(), vec![0.5, 0.5]);
        assert!(p.values()[[0, 0]] > 0.99);
    }

    fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(
            seed in any::<u64>(),
            rows in 1usize..12,
            cols in 1usize..40,
            tau in 1e-3f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0));
            let p = posterior_softmax(&sim(s), tau).unwrap();
            for row in p.values().outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn argmax_is_temperature_invariant(
            seed in any::<u64>(),
            tau in 1e-3f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((6, 15), |_| rng.random_range(-1.0..1.0));
            let p = posterior_softmax(&sim(s.clone()), tau).unwrap();
            for (sr, pr) in s.outer_iter().zip(p.values().outer_iter()) {
                prop_assert_eq!(argmax(sr), argmax(pr));
            }
        }

        #[test]
        fn colder_means_sharper(
            seed in any::<u64>(),
            tau in 0.05f64..5.0,
            factor in 1.1f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((6, 15), |_| rng.random_range(-1.0..1.0));
            let warm = posterior_softmax(&sim(s.clone()), tau).unwrap();
            let cold = posterior_softmax(&sim(s.clone()), tau / factor).unwrap();
            for (i, row) in s.outer_iter().enumerate() {
                let j = argmax(row);
                let unique = row.iter().enumerate().all(|(k, &v)| k == j || v < row[j]);
                if unique && warm.values()[[i, j]] < 1.0 {
                    prop_assert!(cold.values()[[i, j]] > warm.values()[[i, j]]);
                }
            }
        }
    }
}
