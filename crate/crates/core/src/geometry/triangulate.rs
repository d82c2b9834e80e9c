use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::{project, projection_jacobians, CameraIntrinsics, GeometryError, Pose, Vec2, Vec3};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationConfig {
    pub threshold_px: f64,
    /// Points whose widest pair of inlier rays is narrower than this are rejected.
    pub min_angle_deg: f64,
    /// Above this many ray pairs, hypotheses are drawn at random instead of
    /// enumerated.
    pub max_pair_hypotheses: usize,
    pub seed: u64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        TriangulationConfig { threshold_px: 4.0, min_angle_deg: 2.0, max_pair_hypotheses: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulationResult {
    pub xyz: Vec3,
    /// Indices of the supporting observations.
    pub inliers: Vec<usize>,
    pub max_angle_deg: f64,
}

/// Linear triangulation from `[R|t]` matrices and normalized image points.
pub(crate) fn dlt_point(views: &[(Matrix3x4<f64>, Vec2)]) -> Option<Vec3> {
    if views.len() < 2 {
        return None;
    }
    let mut ata = Matrix4::zeros();
    for (p, x) in views {
        let r1: Vector4<f64> = (p.row(2) * x.x - p.row(0)).transpose();
        let r2: Vector4<f64> = (p.row(2) * x.y - p.row(1)).transpose();
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = ata.symmetric_eigen();
    let (idx, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(idx);
    if h[3].abs() < 1e-14 * h.norm() {
        return None;
    }
    let x = Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Linear triangulation over calibrated observations.
pub fn triangulate_dlt(observations: &[(Pose, CameraIntrinsics, Vec2)]) -> Option<Vec3> {
    let views: Vec<_> = observations
        .iter()
        .map(|(pose, k, px)| (pose.projection_matrix(), k.normalize(px)))
        .collect();
    dlt_point(&views)
}

pub(crate) fn ray_angle_deg(c1: &Vec3, c2: &Vec3, x: &Vec3) -> f64 {
    let r1 = x - c1;
    let r2 = x - c2;
    let cos = r1.dot(&r2) / (r1.norm() * r2.norm());
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle in degrees subtended at `x` by the two camera centers.
pub fn triangulation_angle_deg(c1: &Vec3, c2: &Vec3, x: &Vec3) -> f64 {
    ray_angle_deg(c1, c2, x)
}

fn angle_between_rays_deg(obs: &[(Pose, CameraIntrinsics, Vec2)], i: usize, j: usize) -> f64 {
    let (_, di) = super::back_project_ray(&obs[i].1, &obs[i].0, &obs[i].2);
    let (_, dj) = super::back_project_ray(&obs[j].1, &obs[j].0, &obs[j].2);
    di.dot(&dj).clamp(-1.0, 1.0).acos().to_degrees()
}

fn reprojection_sq(o: &(Pose, CameraIntrinsics, Vec2), x: &Vec3) -> Option<f64> {
    project(&o.1, &o.0, x).ok().map(|p| (p - o.2).norm_squared())
}

/// Gauss-Newton on the point alone; returns the refined point only if it
/// lowers the reprojection cost.
fn refine_point(obs: &[(Pose, CameraIntrinsics, Vec2)], idx: &[usize], mut x: Vec3) -> Vec3 {
    let cost = |x: &Vec3| -> f64 { idx.iter().map(|&i| reprojection_sq(&obs[i], x).unwrap_or(1e30)).sum() };
    let mut current = cost(&x);
    for _ in 0..10 {
        let mut h = Matrix3::zeros();
        let mut g = Vec3::zeros();
        for &i in idx {
            let (pose, k, px) = &obs[i];
            let Ok((proj, _, j)) = projection_jacobians(k, pose, &x) else { return x };
            let r = proj - px;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(step) = h.cholesky().map(|c| c.solve(&(-g))) else { break };
        let candidate = x + step;
        let c = cost(&candidate);
        if c >= current {
            break;
        }
        x = candidate;
        let converged = current - c <= 1e-14 * current.max(1e-300);
        current = c;
        if converged {
            break;
        }
    }
    x
}

/// Robust multi-view triangulation: ray pairs propose points, support is
/// counted by reprojection error and positive depth, and the final point is
/// re-estimated over the support set.
pub fn triangulate_multiview_ransac(
    observations: &[(Pose, CameraIntrinsics, Vec2)],
    config: &TriangulationConfig,
) -> Result<TriangulationResult, GeometryError> {
    let n = observations.len();
    if n < 2 {
        return Err(GeometryError::InsufficientData { needed: 2, got: n });
    }
    let thr_sq = config.threshold_px * config.threshold_px;
    let support = |x: &Vec3| -> (Vec<usize>, f64) {
        let mut idx = Vec::new();
        let mut err = 0.0;
        for (i, o) in observations.iter().enumerate() {
            if let Some(e) = reprojection_sq(o, x) {
                if e < thr_sq {
                    idx.push(i);
                    err += e;
                }
            }
        }
        (idx, err)
    };

    let total_pairs = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total_pairs <= config.max_pair_hypotheses {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = seeded(config.seed);
        (0..config.max_pair_hypotheses)
            .map(|_| {
                let s = crate::rng::sample_indices(&mut rng, n, 2);
                (s[0].min(s[1]), s[0].max(s[1]))
            })
            .collect()
    };

    let mut widest = 0.0f64;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (i, j) in pairs {
        let angle = angle_between_rays_deg(observations, i, j);
        widest = widest.max(angle);
        if angle < config.min_angle_deg {
            continue;
        }
        let Some(x) = triangulate_dlt(&[observations[i], observations[j]]) else { continue };
        let (idx, err) = support(&x);
        if idx.len() < 2 {
            continue;
        }
        let better = match &best {
            None => true,
            Some((b, e)) => idx.len() > b.len() || (idx.len() == b.len() && err < *e),
        };
        if better {
            best = Some((idx, err));
        }
    }
    let Some((seed_support, _)) = best else {
        return if widest < config.min_angle_deg {
            Err(GeometryError::ShallowAngle(widest))
        } else {
            Err(GeometryError::NoConsensus)
        };
    };

    let subset: Vec<_> = seed_support.iter().map(|&i| observations[i]).collect();
    let x = triangulate_dlt(&subset).ok_or(GeometryError::NoConsensus)?;
    let x = refine_point(observations, &seed_support, x);
    let (inliers, _) = support(&x);
    if inliers.len() < 2 {
        return Err(GeometryError::NoConsensus);
    }
    let mut max_angle = 0.0f64;
    for (a, &i) in inliers.iter().enumerate() {
        for &j in &inliers[a + 1..] {
            max_angle = max_angle.max(ray_angle_deg(&observations[i].0.center(), &observations[j].0.center(), &x));
        }
    }
    if max_angle < config.min_angle_deg {
        return Err(GeometryError::ShallowAngle(max_angle));
    }
    Ok(TriangulationResult { xyz: x, inliers, max_angle_deg: max_angle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }

    fn ring_cameras(target: &Vec3, radius: f64, angles_deg: &[f64]) -> Vec<Pose> {
        angles_deg
            .iter()
            .map(|a| {
                let a = a.to_radians();
                let c = target + Vec3::new(radius * a.sin(), 0.0, -radius * a.cos());
                Pose::look_at(&c, target, &Vec3::new(0.0, 1.0, 0.0))
            })
            .collect()
    }

    fn observe(poses: &[Pose], x: &Vec3) -> Vec<(Pose, CameraIntrinsics, Vec2)> {
        poses.iter().map(|p| (*p, k(), project(&k(), p, x).unwrap())).collect()
    }

    #[test]
    fn two_rays_at_thirty_degrees_intersect_exactly() {
        let x = Vec3::new(0.3, -0.2, 5.0);
        let poses = ring_cameras(&x, 4.0, &[-15.0, 15.0]);
        let r = triangulate_multiview_ransac(&observe(&poses, &x), &TriangulationConfig::default()).unwrap();
        assert!((r.xyz - x).norm() < 1e-9, "error {}", (r.xyz - x).norm());
        assert_eq!(r.inliers, vec![0, 1]);
        assert!((r.max_angle_deg - 30.0).abs() < 1e-6);
    }

    #[test]
    fn gross_outlier_ray_excluded() {
        let x = Vec3::new(0.0, 0.5, 6.0);
        let poses = ring_cameras(&x, 5.0, &[-20.0, -10.0, 0.0, 10.0, 20.0]);
        let mut obs = observe(&poses, &x);
        obs[2].2 += Vec2::new(40.0, -25.0);
        let r = triangulate_multiview_ransac(&obs, &TriangulationConfig::default()).unwrap();
        assert_eq!(r.inliers, vec![0, 1, 3, 4]);
        assert!((r.xyz - x).norm() < 1e-8);
    }

    #[test]
    fn shallow_angle_rejected() {
        let x = Vec3::new(0.0, 0.0, 5.0);
        let poses = ring_cameras(&x, 4.0, &[-0.25, 0.25]);
        let r = triangulate_multiview_ransac(&observe(&poses, &x), &TriangulationConfig::default());
        assert!(matches!(r, Err(GeometryError::ShallowAngle(a)) if (a - 0.5).abs() < 1e-6));
    }

    #[test]
    fn single_ray_insufficient() {
        let x = Vec3::new(0.0, 0.0, 5.0);
        let poses = ring_cameras(&x, 4.0, &[0.0]);
        assert_eq!(
            triangulate_multiview_ransac(&observe(&poses, &x), &TriangulationConfig::default()),
            Err(GeometryError::InsufficientData { needed: 2, got: 1 })
        );
    }

    #[test]
    fn deterministic_with_many_rays() {
        let x = Vec3::new(0.1, 0.1, 5.0);
        let angles: Vec<f64> = (0..20).map(|i| -30.0 + 3.0 * i as f64).collect();
        let poses = ring_cameras(&x, 6.0, &angles);
        let mut obs = observe(&poses, &x);
        for (i, o) in obs.iter_mut().enumerate() {
            o.2 += Vec2::new(((i * 7) % 5) as f64 * 0.1, ((i * 3) % 4) as f64 * -0.1);
        }
        let cfg = TriangulationConfig { seed: 42, ..Default::default() };
        let a = triangulate_multiview_ransac(&obs, &cfg).unwrap();
        let b = triangulate_multiview_ransac(&obs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.inliers.len(), 20);
    }

    #[test]
    fn dlt_with_rotated_cameras() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        let a = Pose::new(UnitQuaternion::from_euler_angles(0.1, 0.0, 0.0), Vec3::new(0.0, -2.0, 4.0));
        let b = Pose::new(UnitQuaternion::from_euler_angles(0.0, -0.4, 0.0), Vec3::new(0.5, -2.0, 4.0));
        let est = triangulate_dlt(&observe(&[a, b], &x)).unwrap();
        assert!((est - x).norm() < 1e-9);
    }
}
