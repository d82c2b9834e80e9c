use nalgebra::{Matrix3, Matrix3x4, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose, Vec3};

/// Scale, rotation and translation: `p' = s * R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        assert!(scale > 0.0, "similarity scale must be positive");
        SimilarityTransform { scale, rotation, translation }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Maps a world-to-camera pose into the transformed frame. The camera
    /// center moves like a point and the viewing direction rotates by R;
    /// camera-frame coordinates of transformed points are scaled by `s`, so
    /// pixel projections are unchanged.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let rotation = pose.rotation * self.rotation.inverse();
        let center = self.apply_point(&pose.center());
        Pose::from_center(rotation, &center)
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        SimilarityTransform {
            scale: inv_scale,
            rotation: inv_rot,
            translation: -(inv_scale * (inv_rot * self.translation)),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn to_matrix(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation.to_rotation_matrix().into_inner() * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Ratio below which the second principal variance of a point set counts as
/// zero (the set is collinear).
const COLLINEAR_RATIO: f64 = 1e-10;

fn is_collinear(points: &[Vec3]) -> bool {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    }) / n;
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= COLLINEAR_RATIO * ev[0]
}

/// Closed-form least-squares similarity minimizing
/// `sum |dst - (s R src + t)|^2` (Umeyama).
pub fn estimate_similarity_umeyama(src: &[Vec3], dst: &[Vec3]) -> Result<SimilarityTransform, GeometryError> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(GeometryError::InsufficientData { needed: 3, got: n.min(dst.len()) });
    }
    if is_collinear(src) || is_collinear(dst) {
        return Err(GeometryError::DegenerateSample);
    }
    let nf = n as f64;
    let mu_src = src.iter().fold(Vec3::zeros(), |a, p| a + p) / nf;
    let mu_dst = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / nf;
    let mut sigma = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let xs = s - mu_src;
        let xd = d - mu_dst;
        sigma += xd * xs.transpose();
        var_src += xs.norm_squared();
    }
    sigma /= nf;
    var_src /= nf;

    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or(GeometryError::DegenerateSample)?;
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateSample)?;
    let mut s_diag = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = svd.singular_values.dot(&s_diag) / var_src;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(GeometryError::DegenerateSample);
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(SimilarityTransform { scale, rotation, translation })
}
