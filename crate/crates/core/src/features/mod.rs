//! Per-point descriptor containers and 2D-to-3D feature transfer.

mod interchange;
mod nn;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

pub use interchange::{
    read_features, sidecar_path, write_features, Branch, FeatureData, FeatureMeta, FORMAT_VERSION,
    HEADER_LEN, MAGIC,
};
pub use nn::NearestNeighbor;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// An `N x d` descriptor matrix, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    descriptors: Array2<f32>,
}

impl FeatureField {
    pub fn new(descriptors: Array2<f32>) -> Result<Self> {
        if !descriptors.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite descriptor entry".into()));
        }
        Ok(Self { descriptors })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            descriptors: Array2::zeros((n, dim)),
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged descriptor rows".into()));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((rows.len(), dim), flat).unwrap())
    }

    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    pub fn descriptors(&self) -> &Array2<f32> {
        &self.descriptors
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.descriptors
    }
}

/// `V = K^2` pair-conditioned descriptor slices over the same `N` points.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatureStack {
    k: usize,
    descriptors: Array3<f32>,
}

impl ViewFeatureStack {
    pub fn new(k: usize, descriptors: Array3<f32>) -> Result<Self> {
        let views = descriptors.len_of(Axis(0));
        if k == 0 || views != k * k {
            return Err(Error::ViewCount { views, k });
        }
        if !descriptors.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite descriptor entry".into()));
        }
        Ok(Self { k, descriptors })
    }

    /// Stacks per-view fields that share point count and dimension.
    pub fn from_views(k: usize, views: &[FeatureField]) -> Result<Self> {
        let (n, d) = views.first().map_or((0, 0), |f| (f.len(), f.dim()));
        if views.iter().any(|f| f.len() != n || f.dim() != d) {
            return Err(Error::DimensionMismatch(
                "views differ in point count or dimension".into(),
            ));
        }
        let mut arr = Array3::zeros((views.len(), n, d));
        for (mut slot, f) in arr.outer_iter_mut().zip(views) {
            slot.assign(f.descriptors());
        }
        Self::new(k, arr)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn views(&self) -> usize {
        self.descriptors.len_of(Axis(0))
    }

    pub fn len(&self) -> usize {
        self.descriptors.len_of(Axis(1))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.len_of(Axis(2))
    }

    pub fn view(&self, k: usize) -> ArrayView2<'_, f32> {
        self.descriptors.index_axis(Axis(0), k)
    }

    pub fn descriptors(&self) -> &Array3<f32> {
        &self.descriptors
    }
}

/// Dense per-pixel descriptors of one view pair after lifting to 3D.
#[derive(Debug, Clone)]
pub struct LiftedPixelFeatures {
    pub points: PointCloud,
    pub descriptors: FeatureField,
}

impl LiftedPixelFeatures {
    pub fn new(points: PointCloud, descriptors: FeatureField) -> Result<Self> {
        if points.len() != descriptors.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} lifted points but {} descriptors",
                points.len(),
                descriptors.len()
            )));
        }
        Ok(Self {
            points,
            descriptors,
        })
    }
}

fn normalize_rows_in_place(mut m: ndarray::ArrayViewMut2<'_, f32>) {
    m.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| (v as f64 / norm) as f32);
        }
    });
}

/// Scales every nonzero row to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize_rows(f: &FeatureField) -> FeatureField {
    let mut out = f.descriptors.clone();
    normalize_rows_in_place(out.view_mut());
    FeatureField { descriptors: out }
}

/// Row-normalizes every view slice independently.
pub fn l2_normalize_stack(s: &ViewFeatureStack) -> ViewFeatureStack {
    let mut out = s.descriptors.clone();
    for slice in out.outer_iter_mut() {
        normalize_rows_in_place(slice);
    }
    ViewFeatureStack {
        k: s.k,
        descriptors: out,
    }
}

/// Picks one descriptor per point from a view stack: the slice that agrees
/// best (largest summed cosine) with the point's other slices. Ties go to
/// the lowest slice index.
pub fn best_view_descriptors(s: &ViewFeatureStack) -> FeatureField {
    let unit = l2_normalize_stack(s);
    let (views, n, d) = (s.views(), s.len(), s.dim());
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..views {
                let a = unit.descriptors.slice(ndarray::s![k, i, ..]);
                let score: f64 = (0..views)
                    .filter(|&l| l != k)
                    .map(|l| {
                        let b = unit.descriptors.slice(ndarray::s![l, i, ..]);
                        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>()
                    })
                    .sum();
                if score > best.1 {
                    best = (k, score);
                }
            }
            s.descriptors.slice(ndarray::s![best.0, i, ..]).to_vec()
        })
        .collect();
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    FeatureField {
        descriptors: Array2::from_shape_vec((n, d), flat).unwrap(),
    }
}

/// Gives every cloud point the descriptor of its nearest lifted pixel.
///
/// Points with no lifted pixel within `max_dist` keep a zero descriptor and
/// are reported `false` in the coverage mask.
pub fn lift_image_features(
    lp: &LiftedPixelFeatures,
    cloud: &PointCloud,
    max_dist: f64,
) -> Result<(FeatureField, Vec<bool>)> {
    if !(max_dist > 0.0 && max_dist.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "max_dist must be positive, got {max_dist}"
        )));
    }
    let index = NearestNeighbor::build(lp.points.points(), max_dist);
    let hits: Vec<Option<usize>> = cloud
        .points()
        .par_iter()
        .map(|q| index.nearest_within(q, max_dist).map(|(i, _)| i))
        .collect();
    let mut out = Array2::zeros((cloud.len(), lp.descriptors.dim()));
    for (mut row, hit) in out.axis_iter_mut(Axis(0)).zip(&hits) {
        if let Some(i) = hit {
            row.assign(&lp.descriptors.descriptors.row(*i));
        }
    }
    let coverage = hits.iter().map(Option::is_some).collect();
    Ok((FeatureField { descriptors: out }, coverage))
}

/// Lifts every view pair onto the same cloud. A point counts as covered when
/// at least one view supports it.
pub fn lift_view_stack(
    views: &[LiftedPixelFeatures],
    k: usize,
    cloud: &PointCloud,
    max_dist: f64,
) -> Result<(ViewFeatureStack, Vec<bool>)> {
    let mut coverage = vec![false; cloud.len()];
    let mut fields = Vec::with_capacity(views.len());
    for lp in views {
        let (field, mask) = lift_image_features(lp, cloud, max_dist)?;
        coverage.iter_mut().zip(mask).for_each(|(c, m)| *c |= m);
        fields.push(field);
    }
    Ok((ViewFeatureStack::from_views(k, &fields)?, coverage))
}
