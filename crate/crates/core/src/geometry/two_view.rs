use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::triangulate::{dlt_point, ray_angle_deg};
use super::{normalize_2d, CameraIntrinsics, GeometryError, Pose, Vec2, Vec3};
use crate::rng::{ransac_trials, sample_indices, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoViewConfig {
    /// Sampson distance threshold for epipolar inliers, and the transfer
    /// error threshold for the homography fit.
    pub threshold_px: f64,
    /// A pair is accepted only with strictly more epipolar inliers than this.
    pub min_inliers: usize,
    /// Homography inliers at or above this fraction of the epipolar inliers
    /// flag the pair as planar or pure-rotation.
    pub homography_ratio: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for TwoViewConfig {
    fn default() -> Self {
        TwoViewConfig {
            threshold_px: 2.0,
            min_inliers: 50,
            homography_ratio: 0.9,
            max_iterations: 1000,
            confidence: 0.999,
            seed: 0,
        }
    }
}

/// Result of verifying one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewGeometry {
    /// Maps camera-a coordinates into camera b, with unit-norm translation.
    pub relative: Pose,
    pub fundamental: Matrix3<f64>,
    pub essential: Matrix3<f64>,
    /// Indices into the input correspondences.
    pub inliers: Vec<usize>,
    pub homography_inliers: usize,
    pub degenerate: bool,
    pub accepted: bool,
    /// Median over inliers with positive depth in both views; 0 if none.
    pub median_triangulation_angle_deg: f64,
}

/// Normalized 8-point fundamental matrix with `x_b^T F x_a = 0`.
pub fn fundamental_8point(a: &[Vec2], b: &[Vec2]) -> Option<Matrix3<f64>> {
    if a.len() < 8 || a.len() != b.len() {
        return None;
    }
    let (ta, na) = normalize_2d(a);
    let (tb, nb) = normalize_2d(b);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (p, q) in na.iter().zip(&nb) {
        let row = SVector::<f64, 9>::from_column_slice(&[
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ]);
        ata += row * row.transpose();
    }
    let f = smallest_eigvec9(&ata)?;
    let f = Matrix3::from_row_slice(f.as_slice());
    let svd = f.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    s[2] = 0.0;
    let f = u * Matrix3::from_diagonal(&s) * v_t;
    let f = tb.transpose() * f * ta;
    let norm = f.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    Some(f / norm)
}

/// Normalized 4+-point homography with `x_b ~ H x_a`.
pub fn homography_dlt(a: &[Vec2], b: &[Vec2]) -> Option<Matrix3<f64>> {
    if a.len() < 4 || a.len() != b.len() {
        return None;
    }
    let (ta, na) = normalize_2d(a);
    let (tb, nb) = normalize_2d(b);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (p, q) in na.iter().zip(&nb) {
        let r1 = SVector::<f64, 9>::from_column_slice(&[-p.x, -p.y, -1.0, 0.0, 0.0, 0.0, q.x * p.x, q.x * p.y, q.x]);
        let r2 = SVector::<f64, 9>::from_column_slice(&[0.0, 0.0, 0.0, -p.x, -p.y, -1.0, q.y * p.x, q.y * p.y, q.y]);
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let h = smallest_eigvec9(&ata)?;
    let h = Matrix3::from_row_slice(h.as_slice());
    let tb_inv = tb.try_inverse()?;
    let h = tb_inv * h * ta;
    if h[(2, 2)].abs() < 1e-300 || !h.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(h / h[(2, 2)])
}

fn smallest_eigvec9(m: &SMatrix<f64, 9, 9>) -> Option<SVector<f64, 9>> {
    let eig = m.symmetric_eigen();
    let (idx, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    Some(eig.eigenvectors.column(idx).into_owned())
}

fn sampson_sq(f: &Matrix3<f64>, a: &Vec2, b: &Vec2) -> f64 {
    let xa = Vec3::new(a.x, a.y, 1.0);
    let xb = Vec3::new(b.x, b.y, 1.0);
    let fx = f * xa;
    let ftx = f.transpose() * xb;
    let num = xb.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

fn transfer_sq(h: &Matrix3<f64>, a: &Vec2, b: &Vec2) -> f64 {
    let p = h * Vec3::new(a.x, a.y, 1.0);
    if p.z.abs() < 1e-300 {
        return f64::INFINITY;
    }
    (Vec2::new(p.x / p.z, p.y / p.z) - b).norm_squared()
}

/// The four `(R, t)` factorizations of an essential matrix.
pub fn decompose_essential(e: &Matrix3<f64>) -> Option<[(Matrix3<f64>, Vec3); 4]> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut v_t = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();
    Some([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

struct Consensus<M> {
    model: M,
    inliers: Vec<usize>,
}

fn ransac<M, F, S>(n: usize, sample_size: usize, cfg: &TwoViewConfig, seed: u64, mut fit: F, score: S) -> Option<Consensus<M>>
where
    F: FnMut(&[usize]) -> Option<M>,
    S: Fn(&M, usize) -> bool,
{
    let mut rng = seeded(seed);
    let mut best: Option<Consensus<M>> = None;
    let mut needed = cfg.max_iterations;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iterations) {
        iter += 1;
        let sample = sample_indices(&mut rng, n, sample_size);
        let Some(model) = fit(&sample) else { continue };
        let inliers: Vec<usize> = (0..n).filter(|&i| score(&model, i)).collect();
        if best.as_ref().is_none_or(|b| inliers.len() > b.inliers.len()) {
            needed = ransac_trials(inliers.len() as f64 / n as f64, sample_size, cfg.confidence);
            best = Some(Consensus { model, inliers });
        }
    }
    best
}

/// Epipolar verification of one image pair: RANSAC over the normalized
/// 8-point fundamental matrix, lifted to an essential matrix with the known
/// intrinsics, decomposed by cheirality; a parallel homography fit flags
/// planar or pure-rotation geometry.
pub fn two_view_verify(
    correspondences: &[(Vec2, Vec2)],
    intr_a: &CameraIntrinsics,
    intr_b: &CameraIntrinsics,
    config: &TwoViewConfig,
) -> Result<TwoViewGeometry, GeometryError> {
    let n = correspondences.len();
    if n < 8 {
        return Err(GeometryError::InsufficientData { needed: 8, got: n });
    }
    let a: Vec<Vec2> = correspondences.iter().map(|c| c.0).collect();
    let b: Vec<Vec2> = correspondences.iter().map(|c| c.1).collect();
    let thr_sq = config.threshold_px * config.threshold_px;

    let pick = |idx: &[usize]| -> (Vec<Vec2>, Vec<Vec2>) {
        (idx.iter().map(|&i| a[i]).collect(), idx.iter().map(|&i| b[i]).collect())
    };

    let fund = ransac(
        n,
        8,
        config,
        config.seed,
        |s| {
            let (pa, pb) = pick(s);
            fundamental_8point(&pa, &pb)
        },
        |f, i| sampson_sq(f, &a[i], &b[i]) < thr_sq,
    )
    .ok_or(GeometryError::NoConsensus)?;
    if fund.inliers.len() < 8 {
        return Err(GeometryError::NoConsensus);
    }
    // Re-fit on the consensus set until the inlier set stops growing.
    let mut f = fund.model;
    let mut inliers = fund.inliers;
    for _ in 0..3 {
        let (pa, pb) = pick(&inliers);
        let Some(refit) = fundamental_8point(&pa, &pb) else { break };
        let refit_inliers: Vec<usize> = (0..n).filter(|&i| sampson_sq(&refit, &a[i], &b[i]) < thr_sq).collect();
        if refit_inliers.len() < inliers.len() {
            break;
        }
        let done = refit_inliers == inliers;
        f = refit;
        inliers = refit_inliers;
        if done {
            break;
        }
    }

    let homography_inliers = ransac(
        n,
        4,
        config,
        crate::rng::derive_seed(config.seed, &[0x484f_4d4f]),
        |s| {
            let (pa, pb) = pick(s);
            homography_dlt(&pa, &pb)
        },
        |h, i| transfer_sq(h, &a[i], &b[i]) < thr_sq,
    )
    .map_or(0, |c| c.inliers.len());

    let essential_raw = intr_b.k_matrix().transpose() * f * intr_a.k_matrix();
    let svd = essential_raw.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(GeometryError::NoConsensus)?, svd.v_t.ok_or(GeometryError::NoConsensus)?);
    let essential = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)) * v_t;

    let na: Vec<Vec2> = inliers.iter().map(|&i| intr_a.normalize(&a[i])).collect();
    let nb: Vec<Vec2> = inliers.iter().map(|&i| intr_b.normalize(&b[i])).collect();
    let candidates = decompose_essential(&essential).ok_or(GeometryError::NoConsensus)?;
    let mut best: Option<(usize, Pose, Vec<f64>)> = None;
    for (r, t) in candidates.iter() {
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
        let pose_b = Pose::new(rotation, *t);
        let pa = Pose::identity().projection_matrix();
        let pb = pose_b.projection_matrix();
        let center_b = pose_b.center();
        let mut front = 0;
        let mut angles = Vec::new();
        for (xa, xb) in na.iter().zip(&nb) {
            let Some(x) = dlt_point(&[(pa, *xa), (pb, *xb)]) else { continue };
            if x.z > 0.0 && pose_b.transform_point(&x).z > 0.0 {
                front += 1;
                angles.push(ray_angle_deg(&Vec3::zeros(), &center_b, &x));
            }
        }
        if best.as_ref().is_none_or(|b| front > b.0) {
            best = Some((front, pose_b, angles));
        }
    }
    let (_, relative, mut angles) = best.ok_or(GeometryError::NoConsensus)?;
    let median_triangulation_angle_deg = if angles.is_empty() {
        0.0
    } else {
        angles.sort_by(|x, y| x.total_cmp(y));
        angles[angles.len() / 2]
    };

    let degenerate = homography_inliers as f64 >= config.homography_ratio * inliers.len() as f64;
    let accepted = inliers.len() > config.min_inliers && !degenerate;
    Ok(TwoViewGeometry {
        relative,
        fundamental: f,
        essential,
        inliers,
        homography_inliers,
        degenerate,
        accepted,
        median_triangulation_angle_deg,
    })
}

impl Pose {
    /// `[R | t]` as a 3x4 matrix acting on normalized coordinates.
    pub fn projection_matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let mut p = nalgebra::Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        p.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        p
    }
}
