//! 3D primitives: point clouds, rigid transforms, depth maps and the two
//! camera models used to move between them.

mod camera;
mod transform;
mod voxel;

use nalgebra::Point3;

pub use camera::{
    lift_depth, lift_ftheta, project_ftheta, project_pinhole, render_ftheta, render_pinhole,
    CameraModel, DepthMap, FThetaCamera, PinholeCamera, Rendering,
};
pub use transform::{RigidTransform, ROTATION_TOLERANCE};
pub use voxel::voxel_downsample;

use crate::error::{Error, Result};

/// An ordered set of 3D points in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
}

impl PointCloud {
    /// Builds a cloud without validating coordinates. Prefer [`PointCloud::new`]
    /// for data that did not originate inside this crate.
    pub fn from_points(points: Vec<Point3<f64>>) -> Self {
        Self { points }
    }

    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3<f64>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Copies the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::from_points(indices.iter().map(|&i| self.points[i]).collect())
    }
}

impl From<Vec<[f64; 3]>> for PointCloud {
    fn from(v: Vec<[f64; 3]>) -> Self {
        PointCloud::from_points(v.into_iter().map(Point3::from).collect())
    }
}
