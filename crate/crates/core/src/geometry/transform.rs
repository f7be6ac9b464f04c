use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

/// Orthonormality / determinant tolerance for a valid rotation block.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// A rigid motion `x -> R x + t` in SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotation blocks that are not proper
    /// orthonormal matrices.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid() {
            return Err(Error::InvalidParameter(
                "rotation is not orthonormal with det +1".into(),
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite translation".into()));
        }
        Ok(t)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized), then translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Row-major 3x3 rotation followed by translation.
    pub fn from_row_major(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Self> {
        Self::new(
            Matrix3::from_row_slice(rotation),
            Vector3::from_column_slice(translation),
        )
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn is_valid(&self) -> bool {
        let gram = self.rotation.transpose() * self.rotation;
        (gram - Matrix3::identity()).norm() <= ROTATION_TOLERANCE
            && (self.rotation.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
    }

    #[inline]
    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_points(cloud.points().iter().map(|p| self.apply_point(p)).collect())
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        RigidTransform::from_axis_angle(axis, angle, t)
    }

    fn close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        (a.rotation - b.rotation).norm() <= tol && (a.translation - b.translation).norm() <= tol
    }

    #[test]
    fn identity_leaves_points_unchanged() {
        let cloud = PointCloud::from_points(vec![
            Point3::new(1.0, -2.0, 3.5),
            Point3::new(0.0, 0.0, 0.0),
        ]);
        assert_eq!(RigidTransform::identity().apply(&cloud), cloud);
    }

    #[test]
    fn pure_translation() {
        let t = RigidTransform::from_translation(1.0, 0.0, 0.0);
        assert_eq!(t.apply_point(&Point3::origin()), Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let p = t.apply_point(&Point3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn invert_identity_is_identity() {
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            assert!(t.is_valid());
            assert!(close(&t.compose(&t.inverse()), &RigidTransform::identity(), 1e-9));
            assert!(close(&t.inverse().compose(&t), &RigidTransform::identity(), 1e-9));
        }
    }

    #[test]
    fn commuting_translations() {
        let a = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let b = RigidTransform::from_translation(0.0, 1.0, 0.0);
        assert_eq!(a.compose(&b), RigidTransform::from_translation(1.0, 1.0, 0.0));
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        let p = Point3::new(0.3, -1.2, 2.0);
        let lhs = a.compose(&b).apply_point(&p);
        let rhs = a.apply_point(&b.apply_point(&p));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let (a, b, c) = (
                random_transform(&mut rng),
                random_transform(&mut rng),
                random_transform(&mut rng),
            );
            assert!(close(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c)), 1e-9));
        }
    }

    #[test]
    fn apply_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = random_transform(&mut rng);
        let pts: Vec<Point3<f64>> = (0..50)
            .map(|_| {
                Point3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                )
            })
            .collect();
        let cloud = PointCloud::from_points(pts);
        let moved = t.apply(&cloud);
        for i in 0..cloud.len() {
            for j in 0..cloud.len() {
                let d0 = (cloud.points()[i] - cloud.points()[j]).norm();
                let d1 = (moved.points()[i] - moved.points()[j]).norm();
                assert!((d0 - d1).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rejects_reflection() {
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let t = random_transform(&mut rng);
        let back = RigidTransform::from_row_major(
            &t.rotation_row_major(),
            &[t.translation.x, t.translation.y, t.translation.z],
        )
        .unwrap();
        assert_eq!(back, t);
    }
}
