use std::collections::BTreeMap;

use nalgebra::{Matrix2x3, Matrix3, SMatrix, UnitQuaternion, Vector6};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Vec2, Vec3};
use crate::{ImageId, PointId};

/// Calibrated pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = CameraIntrinsics { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.cx < 0.0 || self.cx > self.width as f64 || self.cy < 0.0 || self.cy > self.height as f64 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel to normalized image coordinates (z = 1 plane).
    pub fn normalize(&self, pixel: &Vec2) -> Vec2 {
        Vec2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, xy: &Vec2) -> Vec2 {
        Vec2::new(self.fx * xy.x + self.cx, self.fy * xy.y + self.cy)
    }

    pub fn contains(&self, pixel: &Vec2, margin: f64) -> bool {
        pixel.x >= -margin
            && pixel.y >= -margin
            && pixel.x <= self.width as f64 + margin
            && pixel.y <= self.height as f64 + margin
    }

    /// Mean focal length, used to convert pixel thresholds to angles.
    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// Exterior orientation, world to camera: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    /// Camera looking from `center` towards `target` with the image y axis
    /// pointing roughly along `down`.
    pub fn look_at(center: &Vec3, target: &Vec3, down: &Vec3) -> Self {
        let z = (target - center).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
        Pose::from_center(rotation, center)
    }

    pub fn from_center(rotation: UnitQuaternion<f64>, center: &Vec3) -> Self {
        Pose { rotation, translation: -(rotation * center) }
    }

    pub fn transform_point(&self, xyz: &Vec3) -> Vec3 {
        self.rotation * xyz + self.translation
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Optical axis in world coordinates.
    pub fn viewing_direction(&self) -> Vec3 {
        self.rotation.inverse() * Vec3::z()
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Relative pose mapping camera `self` coordinates into camera `other`.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        let rotation = other.rotation * self.rotation.inverse();
        Pose { rotation, translation: other.translation - rotation * self.translation }
    }

    /// `self` followed by `next`: world -> self camera -> next frame.
    pub fn then(&self, next: &Pose) -> Pose {
        Pose {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }

    /// Apply a local increment `[omega, dt]`: `R' = Exp(omega) R`, `t' = Exp(omega) t + dt`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let omega = delta.fixed_rows::<3>(0).into_owned();
        let dt = delta.fixed_rows::<3>(3).into_owned();
        let q = UnitQuaternion::from_scaled_axis(omega);
        Pose { rotation: q * self.rotation, translation: q * self.translation + dt }
    }

    /// Angle in radians of the rotation between two poses.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// One measured keypoint, optionally linked to a 3D point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image_id: ImageId,
    pub keypoint_index: u32,
    pub pixel: Vec2,
    pub point_id: Option<PointId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackObservation {
    pub keypoint: u32,
    pub pixel: Vec2,
}

/// A 3D point together with the images observing it. Keyed by image id, so
/// an image contributes at most one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub point_id: PointId,
    pub xyz: Vec3,
    pub observations: BTreeMap<ImageId, TrackObservation>,
}

impl Track {
    pub fn new(point_id: PointId, xyz: Vec3) -> Self {
        Track { point_id, xyz, observations: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Pinhole projection of a world point.
pub fn project(intrinsics: &CameraIntrinsics, pose: &Pose, xyz: &Vec3) -> Result<Vec2, GeometryError> {
    let pc = pose.transform_point(xyz);
    if pc.z <= 0.0 || !pc.z.is_finite() {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    Ok(Vec2::new(intrinsics.fx * pc.x / pc.z + intrinsics.cx, intrinsics.fy * pc.y / pc.z + intrinsics.cy))
}

/// Ray through a pixel: camera center and unit direction, both in world frame.
pub fn back_project_ray(intrinsics: &CameraIntrinsics, pose: &Pose, pixel: &Vec2) -> (Vec3, Vec3) {
    let xy = intrinsics.normalize(pixel);
    let dir_cam = Vec3::new(xy.x, xy.y, 1.0).normalize();
    (pose.center(), pose.rotation.inverse() * dir_cam)
}

/// Projection and its analytic Jacobians with respect to the pose increment
/// of [`Pose::retract`] (2x6) and to the world point (2x3).
pub fn projection_jacobians(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    xyz: &Vec3,
) -> Result<(Vec2, SMatrix<f64, 2, 6>, Matrix2x3<f64>), GeometryError> {
    let pc = pose.transform_point(xyz);
    if pc.z <= 0.0 || !pc.z.is_finite() {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let inv_z = 1.0 / pc.z;
    let (fx, fy) = (intrinsics.fx, intrinsics.fy);
    let proj = Vec2::new(fx * pc.x * inv_z + intrinsics.cx, fy * pc.y * inv_z + intrinsics.cy);
    let d_proj = Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * pc.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * pc.y * inv_z * inv_z,
    );
    // d(pc)/d(omega) = -[pc]x, d(pc)/d(dt) = I
    let skew = Matrix3::new(0.0, -pc.z, pc.y, pc.z, 0.0, -pc.x, -pc.y, pc.x, 0.0);
    let mut j_pose = SMatrix::<f64, 2, 6>::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-d_proj * skew));
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    let j_point = d_proj * pose.rotation_matrix();
    Ok((proj, j_pose, j_point))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn intr(f: f64, c: f64) -> CameraIntrinsics {
        CameraIntrinsics { fx: f, fy: f, cx: c, cy: c, width: 640, height: 480 }
    }

    #[test]
    fn project_optical_axis() {
        let px = project(&intr(100.0, 50.0), &Pose::identity(), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vec2::new(50.0, 50.0));
    }

    #[test]
    fn project_similar_triangles() {
        let px = project(&intr(100.0, 0.0), &Pose::identity(), &Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vec2::new(50.0, 0.0));
    }

    #[test]
    fn project_behind_camera_errors() {
        let err = project(&intr(100.0, 0.0), &Pose::identity(), &Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(err, Err(GeometryError::BehindCamera(_))));
        assert!(project(&intr(100.0, 0.0), &Pose::identity(), &Vec3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 11.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 5.0, 10, 10).is_ok());
    }

    #[test]
    fn projection_ray_consistency() {
        let mut rng = crate::rng::seeded(7);
        let k = intr(500.0, 320.0);
        for _ in 0..200 {
            let pose = Pose::new(
                UnitQuaternion::from_scaled_axis(Vec3::new(rng.random(), rng.random(), rng.random()) * 0.5),
                Vec3::new(rng.random(), rng.random(), rng.random()),
            );
            let pc = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..10.0));
            let xyz = pose.rotation.inverse() * (pc - pose.translation);
            let px = project(&k, &pose, &xyz).unwrap();
            let (origin, dir) = back_project_ray(&k, &pose, &px);
            let v = xyz - origin;
            let dist = (v - dir * v.dot(&dir)).norm();
            assert!(dist < 1e-9, "ray misses point by {dist}");
        }
    }

    #[test]
    fn center_and_from_center_agree() {
        let q = UnitQuaternion::from_euler_angles(0.1, -0.4, 1.2);
        let c = Vec3::new(1.0, 2.0, -3.0);
        let pose = Pose::from_center(q, &c);
        assert_relative_eq!(pose.center(), c, epsilon = 1e-12);
        assert_relative_eq!(pose.transform_point(&c), Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let pose = Pose::look_at(&Vec3::new(10.0, 0.0, 2.0), &Vec3::zeros(), &Vec3::new(0.0, 0.0, -1.0));
        let pc = pose.transform_point(&Vec3::zeros());
        assert!(pc.z > 0.0);
        assert_relative_eq!(pc.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(pc.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_pose_composes() {
        let a = Pose::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(1.0, 0.0, 0.5));
        let b = Pose::new(UnitQuaternion::from_euler_angles(-0.3, 0.1, 0.0), Vec3::new(0.0, 2.0, 0.1));
        let rel = a.relative_to(&b);
        let x = Vec3::new(0.3, -0.7, 4.0);
        assert_relative_eq!(rel.transform_point(&a.transform_point(&x)), b.transform_point(&x), epsilon = 1e-12);
        assert_relative_eq!(a.then(&rel).transform_point(&x), b.transform_point(&x), epsilon = 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let k = intr(450.0, 300.0);
        let pose = Pose::new(UnitQuaternion::from_euler_angles(0.2, -0.1, 0.4), Vec3::new(0.2, -0.3, 1.0));
        let x = Vec3::new(0.4, 0.1, 5.0);
        let (_, jp, jx) = projection_jacobians(&k, &pose, &x).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut d = Vector6::zeros();
            d[i] = h;
            let plus = project(&k, &pose.retract(&d), &x).unwrap();
            let minus = project(&k, &pose.retract(&(-d)), &x).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            assert_relative_eq!(fd, jp.column(i).into_owned(), epsilon = 1e-4, max_relative = 1e-5);
        }
        for i in 0..3 {
            let mut d = Vec3::zeros();
            d[i] = h;
            let fd = (project(&k, &pose, &(x + d)).unwrap() - project(&k, &pose, &(x - d)).unwrap()) / (2.0 * h);
            assert_relative_eq!(fd, jx.column(i).into_owned(), epsilon = 1e-4, max_relative = 1e-5);
        }
    }
}
