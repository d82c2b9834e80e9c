use nalgebra::{Matrix3, Matrix3x4, Rotation3, SMatrix, SVector, UnitQuaternion, Vector6};
use serde::{Deserialize, Serialize};

use super::{project, projection_jacobians, CameraIntrinsics, GeometryError, Pose, Vec2, Vec3};
use crate::rng::{ransac_trials, sample_indices, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        PnpConfig { threshold_px: 4.0, max_iterations: 500, min_inliers: 12, confidence: 0.9999, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub inliers: Vec<usize>,
}

const DLT_SAMPLE: usize = 6;

/// Linear (DLT) absolute pose from at least six 2D-3D correspondences.
pub fn pnp_dlt(points: &[(Vec2, Vec3)], intrinsics: &CameraIntrinsics) -> Option<Pose> {
    if points.len() < DLT_SAMPLE {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p.1) / n;
    let mean_dist = points.iter().map(|p| (p.1 - centroid).norm()).sum::<f64>() / n;
    if mean_dist <= 1e-300 {
        return None;
    }
    let s = 3f64.sqrt() / mean_dist;

    let mut ata = SMatrix::<f64, 12, 12>::zeros();
    for (px, xyz) in points {
        let x = intrinsics.normalize(px);
        let w = (xyz - centroid) * s;
        let r1 = SVector::<f64, 12>::from_column_slice(&[
            w.x, w.y, w.z, 1.0, 0.0, 0.0, 0.0, 0.0, -x.x * w.x, -x.x * w.y, -x.x * w.z, -x.x,
        ]);
        let r2 = SVector::<f64, 12>::from_column_slice(&[
            0.0, 0.0, 0.0, 0.0, w.x, w.y, w.z, 1.0, -x.y * w.x, -x.y * w.y, -x.y * w.z, -x.y,
        ]);
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = ata.symmetric_eigen();
    let (idx, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(idx);
    let p_norm = Matrix3x4::from_row_slice(v.as_slice());

    // Undo the 3D normalization: X_n = s (X - c).
    let mut denorm = nalgebra::Matrix4::identity() * s;
    denorm[(3, 3)] = 1.0;
    denorm.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-s * centroid));
    let mut p = p_norm * denorm;

    let depth = (p.fixed_view::<1, 3>(2, 0) * centroid)[0] + p[(2, 3)];
    if depth < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let r = u * v_t;
    if r.determinant() <= 0.0 {
        return None;
    }
    let scale = svd.singular_values.mean();
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    let t = p.column(3) / scale;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Some(Pose::new(rotation, t))
}

fn inlier_set(points: &[(Vec2, Vec3)], k: &CameraIntrinsics, pose: &Pose, thr_sq: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, (px, xyz))| project(k, pose, xyz).is_ok_and(|p| (p - px).norm_squared() < thr_sq))
        .map(|(i, _)| i)
        .collect()
}

/// Levenberg-Marquardt refinement of a pose over fixed 3D points.
pub fn refine_pose(points: &[(Vec2, Vec3)], intrinsics: &CameraIntrinsics, pose: &Pose, iterations: usize) -> Pose {
    let cost = |pose: &Pose| -> f64 {
        points
            .iter()
            .map(|(px, xyz)| project(intrinsics, pose, xyz).map_or(1e12, |p| (p - px).norm_squared()))
            .sum()
    };
    let mut pose = *pose;
    let mut current = cost(&pose);
    let mut lambda = 1e-4;
    for _ in 0..iterations {
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = Vector6::zeros();
        for (px, xyz) in points {
            let Ok((proj, j, _)) = projection_jacobians(intrinsics, &pose, xyz) else { continue };
            h += j.transpose() * j;
            g += j.transpose() * (proj - px);
        }
        if g.amax() < 1e-14 {
            break;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let candidate = pose.retract(&chol.solve(&(-g)));
            let c = cost(&candidate);
            if c < current {
                let rel = (current - c) / current.max(1e-300);
                pose = candidate;
                current = c;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    pose
}

/// RANSAC-wrapped DLT absolute pose with LM refinement on the consensus set.
pub fn pnp_ransac(
    points: &[(Vec2, Vec3)],
    intrinsics: &CameraIntrinsics,
    config: &PnpConfig,
) -> Result<PnpResult, GeometryError> {
    let n = points.len();
    if n < DLT_SAMPLE {
        return Err(GeometryError::InsufficientData { needed: DLT_SAMPLE, got: n });
    }
    let thr_sq = config.threshold_px * config.threshold_px;
    let mut rng = seeded(config.seed);
    let mut best: Option<(Pose, Vec<usize>)> = None;
    let mut needed = config.max_iterations;
    let mut iter = 0;
    while iter < needed.min(config.max_iterations) {
        iter += 1;
        let sample: Vec<(Vec2, Vec3)> = sample_indices(&mut rng, n, DLT_SAMPLE).into_iter().map(|i| points[i]).collect();
        let Some(pose) = pnp_dlt(&sample, intrinsics) else { continue };
        let inliers = inlier_set(points, intrinsics, &pose, thr_sq);
        if best.as_ref().is_none_or(|b| inliers.len() > b.1.len()) {
            needed = ransac_trials(inliers.len() as f64 / n as f64, DLT_SAMPLE, config.confidence);
            best = Some((pose, inliers));
        }
    }
    let Some((mut pose, mut inliers)) = best else {
        return Err(GeometryError::RegistrationFailed("no valid DLT hypothesis".into()));
    };
    if inliers.len() < DLT_SAMPLE {
        return Err(GeometryError::RegistrationFailed(format!("only {} inliers", inliers.len())));
    }
    for _ in 0..3 {
        let subset: Vec<_> = inliers.iter().map(|&i| points[i]).collect();
        if let Some(p) = pnp_dlt(&subset, intrinsics) {
            let p_inliers = inlier_set(points, intrinsics, &p, thr_sq);
            if p_inliers.len() >= inliers.len() {
                pose = p;
            }
        }
        let subset: Vec<_> = inlier_set(points, intrinsics, &pose, thr_sq).into_iter().map(|i| points[i]).collect();
        pose = refine_pose(&subset, intrinsics, &pose, 20);
        let updated = inlier_set(points, intrinsics, &pose, thr_sq);
        let done = updated == inliers;
        inliers = updated;
        if done {
            break;
        }
    }
    if inliers.len() < config.min_inliers {
        return Err(GeometryError::RegistrationFailed(format!(
            "{} inliers, need {}",
            inliers.len(),
            config.min_inliers
        )));
    }
    Ok(PnpResult { pose, inliers })
}
