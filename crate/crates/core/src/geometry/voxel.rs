use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};

use super::PointCloud;
use crate::error::{Error, Result};

pub(crate) fn voxel_index(p: &Point3<f64>, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Replaces the points of every occupied voxel by their centroid. Output is
/// ordered by ascending `(ix, iy, iz)` voxel index.
pub fn voxel_downsample(c: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "voxel size must be positive, got {voxel}"
        )));
    }
    let mut cells: BTreeMap<(i64, i64, i64), Vec<Point3<f64>>> = BTreeMap::new();
    for p in c.points() {
        cells.entry(voxel_index(p, voxel)).or_default().push(*p);
    }
    let points = cells
        .into_values()
        .map(|mut members| {
            // canonical summation order so the centroid does not depend on input order
            members.sort_by(|a, b| {
                a.x.total_cmp(&b.x)
                    .then(a.y.total_cmp(&b.y))
                    .then(a.z.total_cmp(&b.z))
            });
            let sum: Vector3<f64> = members.iter().map(|p| p.coords).sum();
            Point3::from(sum / members.len() as f64)
        })
        .collect();
    Ok(PointCloud::from_points(points))
}
