//! Sparse Levenberg-Marquardt bundle adjustment.
//!
//! Cameras are parameterized by a 6-vector local increment `[omega, dt]`
//! composed on the left (`R' = Exp(omega) R`, `t' = Exp(omega) t + dt`) and
//! points by a plain 3-vector. Each LM iteration eliminates the points
//! through the Schur complement and solves the reduced camera system with a
//! dense Cholesky factorization.
//!
//! The weighted local variant scales the damping of each camera's diagonal
//! block by `1 / p_j`: a weight of 1 gives the ordinary LM step, smaller
//! weights shrink that camera's update, and `Weight::Fixed` cameras are
//! removed from the parameter vector entirely while their observations still
//! constrain the points.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::Weight;
use crate::geometry::{projection_jacobians, CameraIntrinsics, Pose, Vec2, Vec3};
use crate::{ImageId, PointId};

type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix6 = SMatrix<f64, 6, 6>;
type Matrix6x3 = SMatrix<f64, 6, 3>;

/// Floor on damping diagonal entries so unobserved directions stay invertible.
const DIAG_FLOOR: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BundleError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("reduced system is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaCamera {
    pub image_id: ImageId,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub weight: Weight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaPoint {
    pub point_id: PointId,
    pub xyz: Vec3,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock {
    pub camera: usize,
    pub point: usize,
    pub measured: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    None,
    Huber { delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub cameras: Vec<BaCamera>,
    pub points: Vec<BaPoint>,
    pub residuals: Vec<ResidualBlock>,
    pub loss: Loss,
}

impl BaProblem {
    pub fn validate(&self) -> Result<(), BundleError> {
        let mut cams_per_point: Vec<Vec<usize>> = vec![Vec::new(); self.points.len()];
        for (i, r) in self.residuals.iter().enumerate() {
            if r.camera >= self.cameras.len() || r.point >= self.points.len() {
                return Err(BundleError::InvalidProblem(format!("residual {i} references a missing camera or point")));
            }
            cams_per_point[r.point].push(r.camera);
        }
        for (i, cams) in cams_per_point.iter_mut().enumerate() {
            if self.points[i].fixed {
                continue;
            }
            cams.sort_unstable();
            cams.dedup();
            if cams.len() < 2 {
                return Err(BundleError::InvalidProblem(format!(
                    "free point {} is seen by fewer than two cameras",
                    self.points[i].point_id
                )));
            }
            if cams.iter().all(|&c| self.cameras[c].weight.is_fixed()) {
                return Err(BundleError::InvalidProblem(format!(
                    "free point {} is seen only by fixed cameras",
                    self.points[i].point_id
                )));
            }
        }
        if let Loss::Huber { delta } = self.loss {
            if !(delta > 0.0) {
                return Err(BundleError::InvalidArgument("huber delta must be positive".into()));
            }
        }
        if self.cameras.iter().any(|c| c.weight.finite().is_some_and(|w| !(w > 0.0 && w.is_finite()))) {
            return Err(BundleError::InvalidArgument("finite camera weights must be positive".into()));
        }
        Ok(())
    }

    /// Plain pixel reprojection error of each residual block (`None` when
    /// the point is not in front of the camera).
    pub fn reprojection_errors(&self) -> Vec<Option<f64>> {
        self.residuals
            .iter()
            .map(|r| {
                let cam = &self.cameras[r.camera];
                crate::geometry::project(&cam.intrinsics, &cam.pose, &self.points[r.point].xyz)
                    .ok()
                    .map(|p| (p - r.measured).norm())
            })
            .collect()
    }

    pub fn rms_reprojection(&self) -> f64 {
        let errs: Vec<f64> = self.reprojection_errors().into_iter().flatten().collect();
        if errs.is_empty() {
            return 0.0;
        }
        (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
    }

    pub fn mean_reprojection(&self) -> f64 {
        let errs: Vec<f64> = self.reprojection_errors().into_iter().flatten().collect();
        if errs.is_empty() {
            return 0.0;
        }
        errs.iter().sum::<f64>() / errs.len() as f64
    }

    fn with_unit_weights(&self) -> BaProblem {
        let mut p = self.clone();
        for c in p.cameras.iter_mut() {
            if !c.weight.is_fixed() {
                c.weight = Weight::Finite(1.0);
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Stop once the step norm falls below this fraction of the parameter norm.
    pub parameter_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_iterations: 100,
            cost_tolerance: 1e-8,
            parameter_tolerance: 1e-12,
        }
    }
}

impl LmConfig {
    pub fn local() -> Self {
        LmConfig { max_iterations: 25, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let ok = self.lambda_init > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0
            && self.max_iterations > 0
            && self.cost_tolerance > 0.0
            && self.parameter_tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(BundleError::InvalidArgument(format!("invalid LM configuration {self:?}")))
        }
    }
}

/// Residual and Jacobians of one block, already scaled by the robust weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockLinearization {
    pub residual: Vec2,
    pub camera_jacobian: Matrix2x6,
    pub point_jacobian: Matrix2x3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Total (robustified) cost.
    pub cost: f64,
    /// `None` for blocks whose point is at or behind the camera.
    pub blocks: Vec<Option<BlockLinearization>>,
    pub dropped: usize,
}

pub fn evaluate(problem: &BaProblem) -> Evaluation {
    let mut cost = 0.0;
    let mut dropped = 0;
    let blocks = problem
        .residuals
        .iter()
        .map(|r| {
            let cam = &problem.cameras[r.camera];
            let Ok((proj, jc, jp)) = projection_jacobians(&cam.intrinsics, &cam.pose, &problem.points[r.point].xyz)
            else {
                dropped += 1;
                return None;
            };
            let f = proj - r.measured;
            let sq = f.norm_squared();
            let scale = match problem.loss {
                Loss::Huber { delta } if sq > delta * delta => {
                    let n = sq.sqrt();
                    cost += 2.0 * delta * n - delta * delta;
                    (delta / n).sqrt()
                }
                _ => {
                    cost += sq;
                    1.0
                }
            };
            Some(BlockLinearization { residual: f * scale, camera_jacobian: jc * scale, point_jacobian: jp * scale })
        })
        .collect();
    Evaluation { cost, blocks, dropped }
}

/// Increments for every camera and point (zero for constant ones).
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub delta_cameras: Vec<Vector6<f64>>,
    pub delta_points: Vec<Vec3>,
    /// `|f + J delta|^2` under the linearization.
    pub predicted_cost: f64,
}

impl Step {
    pub fn norm(&self) -> f64 {
        let c: f64 = self.delta_cameras.iter().map(|d| d.norm_squared()).sum();
        let p: f64 = self.delta_points.iter().map(|d| d.norm_squared()).sum();
        (c + p).sqrt()
    }
}

struct Layout {
    cam_index: Vec<Option<usize>>,
    point_index: Vec<Option<usize>>,
    /// `1 / p_j` per free camera.
    damping_scale: Vec<f64>,
    n_cams: usize,
    n_points: usize,
}

impl Layout {
    fn new(problem: &BaProblem) -> Layout {
        let mut n_cams = 0;
        let mut damping_scale = Vec::new();
        let cam_index = problem
            .cameras
            .iter()
            .map(|c| {
                c.weight.finite().map(|w| {
                    damping_scale.push(1.0 / w);
                    n_cams += 1;
                    n_cams - 1
                })
            })
            .collect();
        let mut n_points = 0;
        let point_index = problem
            .points
            .iter()
            .map(|p| {
                (!p.fixed).then(|| {
                    n_points += 1;
                    n_points - 1
                })
            })
            .collect();
        Layout { cam_index, point_index, damping_scale, n_cams, n_points }
    }
}

fn damp6(m: &Matrix6, scale: f64) -> Matrix6 {
    let mut out = *m;
    for i in 0..6 {
        out[(i, i)] += scale * m[(i, i)].max(DIAG_FLOOR);
    }
    out
}

fn damp3(m: &Matrix3<f64>, scale: f64) -> Matrix3<f64> {
    let mut out = *m;
    for i in 0..3 {
        out[(i, i)] += scale * m[(i, i)].max(DIAG_FLOOR);
    }
    out
}

fn predicted_cost(problem: &BaProblem, eval: &Evaluation, dc: &[Vector6<f64>], dp: &[Vec3]) -> f64 {
    problem
        .residuals
        .iter()
        .zip(&eval.blocks)
        .filter_map(|(r, b)| b.as_ref().map(|b| (r, b)))
        .map(|(r, b)| (b.residual + b.camera_jacobian * dc[r.camera] + b.point_jacobian * dp[r.point]).norm_squared())
        .sum()
}

/// One damped Gauss-Newton step via the Schur complement on the points.
/// Camera damping is scaled by the inverse of each camera's weight.
pub fn lm_step_schur(problem: &BaProblem, eval: &Evaluation, lambda: f64) -> Result<Step, BundleError> {
    let layout = Layout::new(problem);
    let nc = layout.n_cams;
    let mut u = vec![Matrix6::zeros(); nc];
    let mut b_c = vec![Vector6::zeros(); nc];
    let mut v = vec![Matrix3::zeros(); layout.n_points];
    let mut b_p = vec![Vec3::zeros(); layout.n_points];
    // Per free point: (free camera index, W block) for every joint observation.
    let mut w_blocks: Vec<Vec<(usize, Matrix6x3)>> = vec![Vec::new(); layout.n_points];

    for (r, block) in problem.residuals.iter().zip(&eval.blocks) {
        let Some(b) = block else { continue };
        let ci = layout.cam_index[r.camera];
        let pi = layout.point_index[r.point];
        if let Some(ci) = ci {
            u[ci] += b.camera_jacobian.transpose() * b.camera_jacobian;
            b_c[ci] -= b.camera_jacobian.transpose() * b.residual;
        }
        if let Some(pi) = pi {
            v[pi] += b.point_jacobian.transpose() * b.point_jacobian;
            b_p[pi] -= b.point_jacobian.transpose() * b.residual;
        }
        if let (Some(ci), Some(pi)) = (ci, pi) {
            let w = b.camera_jacobian.transpose() * b.point_jacobian;
            match w_blocks[pi].iter_mut().find(|(c, _)| *c == ci) {
                Some((_, acc)) => *acc += w,
                None => w_blocks[pi].push((ci, w)),
            }
        }
    }

    let v_inv: Vec<Matrix3<f64>> = v
        .iter()
        .map(|vp| damp3(vp, lambda).cholesky().map(|c| c.inverse()).ok_or(BundleError::NotPositiveDefinite))
        .collect::<Result<_, _>>()?;

    let mut s = DMatrix::<f64>::zeros(6 * nc, 6 * nc);
    let mut rhs = DVector::<f64>::zeros(6 * nc);
    for ci in 0..nc {
        let damped = damp6(&u[ci], lambda * layout.damping_scale[ci]);
        s.fixed_view_mut::<6, 6>(6 * ci, 6 * ci).copy_from(&damped);
        rhs.fixed_rows_mut::<6>(6 * ci).copy_from(&b_c[ci]);
    }
    for (pi, blocks) in w_blocks.iter().enumerate() {
        let vi = &v_inv[pi];
        for (ca, wa) in blocks {
            let wa_vi: Matrix6x3 = wa * vi;
            let mut r = rhs.fixed_rows_mut::<6>(6 * ca);
            r -= wa_vi * b_p[pi];
            for (cb, wb) in blocks {
                let mut blk = s.fixed_view_mut::<6, 6>(6 * ca, 6 * cb);
                blk -= wa_vi * wb.transpose();
            }
        }
    }

    let delta_c = if nc > 0 {
        let chol = s.cholesky().ok_or(BundleError::NotPositiveDefinite)?;
        chol.solve(&rhs)
    } else {
        DVector::zeros(0)
    };

    let mut delta_cameras = vec![Vector6::zeros(); problem.cameras.len()];
    for (j, ci) in layout.cam_index.iter().enumerate() {
        if let Some(ci) = ci {
            delta_cameras[j] = delta_c.fixed_rows::<6>(6 * ci).into_owned();
        }
    }
    let mut delta_points = vec![Vec3::zeros(); problem.points.len()];
    for (i, pi) in layout.point_index.iter().enumerate() {
        if let Some(pi) = *pi {
            let mut rhs_p = b_p[pi];
            for (ci, w) in &w_blocks[pi] {
                rhs_p -= w.transpose() * delta_c.fixed_rows::<6>(6 * ci);
            }
            delta_points[i] = v_inv[pi] * rhs_p;
        }
    }
    let predicted_cost = predicted_cost(problem, eval, &delta_cameras, &delta_points);
    Ok(Step { delta_cameras, delta_points, predicted_cost })
}

/// Same step as [`lm_step_schur`] computed from the full normal equations.
/// Cubic in the parameter count; meant for checking the reduced solve.
pub fn lm_step_dense(problem: &BaProblem, eval: &Evaluation, lambda: f64) -> Result<Step, BundleError> {
    let layout = Layout::new(problem);
    let n = 6 * layout.n_cams + 3 * layout.n_points;
    let rows = 2 * eval.blocks.iter().filter(|b| b.is_some()).count();
    let mut j = DMatrix::<f64>::zeros(rows, n);
    let mut f = DVector::<f64>::zeros(rows);
    let mut row = 0;
    for (r, block) in problem.residuals.iter().zip(&eval.blocks) {
        let Some(b) = block else { continue };
        f.fixed_rows_mut::<2>(row).copy_from(&b.residual);
        if let Some(ci) = layout.cam_index[r.camera] {
            j.fixed_view_mut::<2, 6>(row, 6 * ci).copy_from(&b.camera_jacobian);
        }
        if let Some(pi) = layout.point_index[r.point] {
            j.fixed_view_mut::<2, 3>(row, 6 * layout.n_cams + 3 * pi).copy_from(&b.point_jacobian);
        }
        row += 2;
    }
    let h = j.transpose() * &j;
    let g = j.transpose() * &f;
    let mut h_damped = h.clone();
    for k in 0..n {
        let scale = if k < 6 * layout.n_cams { lambda * layout.damping_scale[k / 6] } else { lambda };
        h_damped[(k, k)] += scale * h[(k, k)].max(DIAG_FLOOR);
    }
    let delta = h_damped.cholesky().ok_or(BundleError::NotPositiveDefinite)?.solve(&(-g));

    let mut delta_cameras = vec![Vector6::zeros(); problem.cameras.len()];
    for (jdx, ci) in layout.cam_index.iter().enumerate() {
        if let Some(ci) = ci {
            delta_cameras[jdx] = delta.fixed_rows::<6>(6 * ci).into_owned();
        }
    }
    let mut delta_points = vec![Vec3::zeros(); problem.points.len()];
    for (i, pi) in layout.point_index.iter().enumerate() {
        if let Some(pi) = pi {
            delta_points[i] = delta.fixed_rows::<3>(6 * layout.n_cams + 3 * pi).into_owned();
        }
    }
    let predicted_cost = predicted_cost(problem, eval, &delta_cameras, &delta_points);
    Ok(Step { delta_cameras, delta_points, predicted_cost })
}

pub fn apply_step(problem: &BaProblem, step: &Step) -> BaProblem {
    let mut out = problem.clone();
    for (cam, d) in out.cameras.iter_mut().zip(&step.delta_cameras) {
        if !cam.weight.is_fixed() {
            cam.pose = cam.pose.retract(d);
        }
    }
    for (pt, d) in out.points.iter_mut().zip(&step.delta_points) {
        if !pt.fixed {
            pt.xyz += d;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    ZeroCost,
    SmallGradient,
    CostTolerance,
    ParameterTolerance,
    MaxIterations,
    /// Every step was rejected until the damping overflowed.
    LambdaOverflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_iterations: usize,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub dropped_residuals: usize,
}

fn parameter_norm(problem: &BaProblem) -> f64 {
    let c: f64 = problem.cameras.iter().filter(|c| !c.weight.is_fixed()).map(|c| c.pose.translation.norm_squared()).sum();
    let p: f64 = problem.points.iter().filter(|p| !p.fixed).map(|p| p.xyz.norm_squared()).sum();
    (c + p).sqrt()
}

fn gradient_inf_norm(problem: &BaProblem, eval: &Evaluation) -> f64 {
    let mut g_c = vec![Vector6::<f64>::zeros(); problem.cameras.len()];
    let mut g_p = vec![Vec3::zeros(); problem.points.len()];
    for (r, b) in problem.residuals.iter().zip(&eval.blocks) {
        let Some(b) = b else { continue };
        g_c[r.camera] += b.camera_jacobian.transpose() * b.residual;
        g_p[r.point] += b.point_jacobian.transpose() * b.residual;
    }
    let c = problem
        .cameras
        .iter()
        .zip(&g_c)
        .filter(|(c, _)| !c.weight.is_fixed())
        .map(|(_, g)| g.amax())
        .fold(0.0, f64::max);
    let p = problem.points.iter().zip(&g_p).filter(|(p, _)| !p.fixed).map(|(_, g)| g.amax()).fold(0.0, f64::max);
    c.max(p)
}

fn run_lm(mut problem: BaProblem, config: &LmConfig) -> Result<(BaProblem, SolveReport), BundleError> {
    config.validate()?;
    problem.validate()?;
    let mut eval = evaluate(&problem);
    let mut report = SolveReport {
        initial_cost: eval.cost,
        final_cost: eval.cost,
        accepted_iterations: 0,
        iterations: Vec::new(),
        termination: Termination::MaxIterations,
        dropped_residuals: eval.dropped,
    };
    let mut lambda = config.lambda_init;
    let start = Instant::now();
    let mut iteration = 0;
    'outer: while report.accepted_iterations < config.max_iterations {
        if eval.cost == 0.0 {
            report.termination = Termination::ZeroCost;
            break;
        }
        if gradient_inf_norm(&problem, &eval) <= 1e-14 * (1.0 + eval.cost) {
            report.termination = Termination::SmallGradient;
            break;
        }
        loop {
            if lambda > LAMBDA_MAX {
                report.termination = Termination::LambdaOverflow;
                break 'outer;
            }
            iteration += 1;
            let step = match lm_step_schur(&problem, &eval, lambda) {
                Ok(s) => s,
                Err(BundleError::NotPositiveDefinite) => {
                    lambda *= config.lambda_up;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let step_norm = step.norm();
            if step_norm <= config.parameter_tolerance * (parameter_norm(&problem) + config.parameter_tolerance) {
                report.termination = Termination::ParameterTolerance;
                break 'outer;
            }
            let candidate = apply_step(&problem, &step);
            let cand_eval = evaluate(&candidate);
            let accepted = cand_eval.dropped <= eval.dropped && cand_eval.cost < eval.cost;
            report.iterations.push(IterationRecord {
                iteration,
                cost: if accepted { cand_eval.cost } else { eval.cost },
                lambda,
                step_norm,
                accepted,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            if !accepted {
                lambda *= config.lambda_up;
                continue;
            }
            let relative_decrease = (eval.cost - cand_eval.cost) / eval.cost;
            problem = candidate;
            eval = cand_eval;
            lambda = (lambda * config.lambda_down).max(1e-300);
            report.accepted_iterations += 1;
            if relative_decrease < config.cost_tolerance {
                report.termination = Termination::CostTolerance;
                break 'outer;
            }
            break;
        }
    }
    report.final_cost = eval.cost;
    report.dropped_residuals = eval.dropped;
    Ok((problem, report))
}

/// Standard LM over every non-fixed camera and free point. Finite camera
/// weights are ignored; `Weight::Fixed` cameras still hold the gauge.
pub fn solve(problem: &BaProblem, config: &LmConfig) -> Result<(BaProblem, SolveReport), BundleError> {
    let (mut out, report) = run_lm(problem.with_unit_weights(), config)?;
    for (c, orig) in out.cameras.iter_mut().zip(&problem.cameras) {
        c.weight = orig.weight;
    }
    Ok((out, report))
}

/// LM with per-camera damping scaled by the inverse camera weight.
pub fn solve_weighted_local(problem: &BaProblem, config: &LmConfig) -> Result<(BaProblem, SolveReport), BundleError> {
    if problem.cameras.iter().all(|c| c.weight.is_fixed()) {
        return Err(BundleError::InvalidArgument("every camera is fixed".into()));
    }
    run_lm(problem.clone(), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use nalgebra::UnitQuaternion;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }

    /// Cameras on an arc looking at a point cloud around the origin.
    fn synthetic(rng: &mut crate::rng::Rng, n_cams: usize, n_points: usize, sigma: f64) -> (BaProblem, BaProblem) {
        let cameras: Vec<BaCamera> = (0..n_cams)
            .map(|i| {
                let a = i as f64 * 0.25;
                let center = Vec3::new(10.0 * a.sin(), rng.random_range(-1.0..1.0), -10.0 * a.cos());
                BaCamera {
                    image_id: ImageId(i as u64),
                    pose: Pose::look_at(&center, &Vec3::zeros(), &Vec3::new(0.0, 1.0, 0.0)),
                    intrinsics: k(),
                    weight: Weight::Finite(1.0),
                }
            })
            .collect();
        let points: Vec<BaPoint> = (0..n_points)
            .map(|i| BaPoint {
                point_id: PointId(i as u64),
                xyz: Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                fixed: false,
            })
            .collect();
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut residuals = Vec::new();
        for (ci, c) in cameras.iter().enumerate() {
            for (pi, p) in points.iter().enumerate() {
                let mut px = project(&c.intrinsics, &c.pose, &p.xyz).unwrap();
                if sigma > 0.0 {
                    px += Vec2::new(noise.sample(rng), noise.sample(rng));
                }
                residuals.push(ResidualBlock { camera: ci, point: pi, measured: px });
            }
        }
        let truth = BaProblem { cameras, points, residuals, loss: Loss::None };
        (truth.clone(), truth)
    }

    fn perturb(rng: &mut crate::rng::Rng, p: &mut BaProblem, rot_deg: f64, point_frac: f64, skip_first: bool) {
        for (i, c) in p.cameras.iter_mut().enumerate() {
            if skip_first && i == 0 {
                continue;
            }
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let q = UnitQuaternion::from_scaled_axis(axis.normalize() * rot_deg.to_radians());
            c.pose = Pose::new(q * c.pose.rotation, c.pose.translation);
        }
        for pt in p.points.iter_mut() {
            pt.xyz *= 1.0 + point_frac * rng.random_range(-1.0..1.0);
        }
    }

    #[test]
    fn zero_cost_at_ground_truth() {
        let mut rng = crate::rng::seeded(1);
        let (p, _) = synthetic(&mut rng, 3, 8, 0.0);
        let e = evaluate(&p);
        assert!(e.cost < 1e-18);
        assert!(e.blocks.iter().all(|b| b.unwrap().residual.norm() < 1e-9));
    }

    #[test]
    fn unit_pixel_perturbation_costs_one() {
        let mut rng = crate::rng::seeded(1);
        let (mut p, _) = synthetic(&mut rng, 2, 5, 0.0);
        let c = &p.cameras[0];
        let exact = project(&c.intrinsics, &c.pose, &p.points[0].xyz).unwrap();
        for r in p.residuals.iter_mut() {
            let cam = &p.cameras[r.camera];
            r.measured = project(&cam.intrinsics, &cam.pose, &p.points[r.point].xyz).unwrap();
        }
        p.residuals[0].measured = exact + Vec2::new(1.0, 0.0);
        assert!((evaluate(&p).cost - 1.0).abs() < 1e-9);
    }

    #[test]
    fn huber_cost_is_linear_in_tail() {
        let mut rng = crate::rng::seeded(1);
        let (mut p, _) = synthetic(&mut rng, 2, 5, 0.0);
        p.residuals[0].measured.x += 10.0;
        p.loss = Loss::Huber { delta: 2.0 };
        let e = evaluate(&p);
        assert!((e.cost - (2.0 * 2.0 * 10.0 - 4.0)).abs() < 1e-6);
    }

    #[test]
    fn schur_matches_dense() {
        let mut rng = crate::rng::seeded(2);
        for trial in 0..20 {
            let (_, mut p) = synthetic(&mut rng, 2 + trial % 3, 5 + trial % 7, 0.5);
            perturb(&mut rng, &mut p, 1.0, 0.02, false);
            if trial % 2 == 0 {
                p.cameras[0].weight = Weight::Fixed;
                p.cameras[1].weight = Weight::Finite(0.3);
            }
            let e = evaluate(&p);
            let s = lm_step_schur(&p, &e, 1e-3).unwrap();
            let d = lm_step_dense(&p, &e, 1e-3).unwrap();
            let diff = Step {
                delta_cameras: s.delta_cameras.iter().zip(&d.delta_cameras).map(|(a, b)| a - b).collect(),
                delta_points: s.delta_points.iter().zip(&d.delta_points).map(|(a, b)| a - b).collect(),
                predicted_cost: 0.0,
            };
            assert!(diff.norm() <= 1e-8 * d.norm(), "trial {trial}: {} vs {}", diff.norm(), d.norm());
        }
    }

    #[test]
    fn huge_damping_shrinks_step() {
        let mut rng = crate::rng::seeded(3);
        let (_, mut p) = synthetic(&mut rng, 3, 10, 0.5);
        perturb(&mut rng, &mut p, 1.0, 0.02, false);
        let e = evaluate(&p);
        let small = lm_step_schur(&p, &e, 1e12).unwrap();
        let normal = lm_step_schur(&p, &e, 1e-4).unwrap();
        assert!(small.norm() < 1e-9 * normal.norm().max(1.0));
    }

    #[test]
    fn zero_step_at_optimum() {
        let mut rng = crate::rng::seeded(4);
        let (p, _) = synthetic(&mut rng, 3, 10, 0.0);
        let s = lm_step_schur(&p, &evaluate(&p), 1e-4).unwrap();
        assert!(s.norm() < 1e-12);
    }

    #[test]
    fn ground_truth_terminates_immediately() {
        let mut rng = crate::rng::seeded(5);
        let (p, _) = synthetic(&mut rng, 4, 10, 0.0);
        let (_, report) = solve(&p, &LmConfig::default()).unwrap();
        assert!(report.accepted_iterations <= 2);
        assert!(report.final_cost < 1e-16);
    }

    #[test]
    fn noiseless_perturbed_problem_converges() {
        let mut rng = crate::rng::seeded(6);
        let (_, mut p) = synthetic(&mut rng, 6, 30, 0.0);
        perturb(&mut rng, &mut p, 1.0, 0.01, true);
        p.cameras[0].weight = Weight::Fixed;
        let (out, report) = solve(&p, &LmConfig::default()).unwrap();
        assert!(out.rms_reprojection() <= 1e-6, "rms {}", out.rms_reprojection());
        let accepted: Vec<f64> = report.iterations.iter().filter(|r| r.accepted).map(|r| r.cost).collect();
        assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.final_cost <= report.initial_cost);
    }

    #[test]
    fn noisy_problem_rms_matches_noise_level() {
        let mut rng = crate::rng::seeded(7);
        let (_, mut p) = synthetic(&mut rng, 10, 60, 0.5);
        perturb(&mut rng, &mut p, 0.5, 0.01, true);
        p.cameras[0].weight = Weight::Fixed;
        let (out, _) = solve(&p, &LmConfig::default()).unwrap();
        let rms = out.rms_reprojection();
        assert!((0.3..=0.7).contains(&rms), "rms {rms}");
    }

    #[test]
    fn unit_weights_match_unweighted_step() {
        let mut rng = crate::rng::seeded(8);
        let (_, mut p) = synthetic(&mut rng, 4, 12, 0.5);
        perturb(&mut rng, &mut p, 1.0, 0.02, false);
        p.cameras[0].weight = Weight::Fixed;
        let (a, _) = solve(&p, &LmConfig::local()).unwrap();
        let (b, _) = solve_weighted_local(&p, &LmConfig::local()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_cameras_unchanged() {
        let mut rng = crate::rng::seeded(9);
        let (_, mut p) = synthetic(&mut rng, 5, 15, 0.5);
        perturb(&mut rng, &mut p, 1.0, 0.02, false);
        p.cameras[3].weight = Weight::Fixed;
        p.cameras[4].weight = Weight::Fixed;
        p.cameras[1].weight = Weight::Finite(0.0625);
        let (out, _) = solve_weighted_local(&p, &LmConfig::local()).unwrap();
        assert_eq!(out.cameras[3].pose, p.cameras[3].pose);
        assert_eq!(out.cameras[4].pose, p.cameras[4].pose);
        assert_ne!(out.cameras[1].pose, p.cameras[1].pose);
    }

    #[test]
    fn tiny_weight_damps_camera_update() {
        let mut rng = crate::rng::seeded(10);
        let (_, mut p) = synthetic(&mut rng, 4, 15, 0.5);
        perturb(&mut rng, &mut p, 1.0, 0.02, false);
        p.cameras[0].weight = Weight::Fixed;
        let e = evaluate(&p);
        let free = lm_step_schur(&p, &e, 1e-2).unwrap();
        p.cameras[2].weight = Weight::Finite(1e-9);
        let damped = lm_step_schur(&p, &e, 1e-2).unwrap();
        let ratio = free.delta_cameras[2].norm() / damped.delta_cameras[2].norm();
        assert!(ratio >= 1e6, "ratio {ratio}");
    }

    #[test]
    fn all_fixed_is_invalid() {
        let mut rng = crate::rng::seeded(11);
        let (mut p, _) = synthetic(&mut rng, 2, 5, 0.0);
        for c in p.cameras.iter_mut() {
            c.weight = Weight::Fixed;
        }
        assert!(matches!(solve_weighted_local(&p, &LmConfig::local()), Err(BundleError::InvalidArgument(_))));
    }

    #[test]
    fn point_behind_camera_is_dropped() {
        let mut rng = crate::rng::seeded(12);
        let (mut p, _) = synthetic(&mut rng, 2, 5, 0.0);
        let c = p.cameras[0].pose.center();
        p.points[0].xyz = c - 3.0 * p.cameras[0].pose.viewing_direction();
        let e = evaluate(&p);
        let idx = p.residuals.iter().position(|r| r.camera == 0 && r.point == 0).unwrap();
        assert!(e.blocks[idx].is_none());
        assert!(e.dropped >= 1);
    }

    #[test]
    fn similarity_gauge_leaves_final_cost_unchanged() {
        let mut rng = crate::rng::seeded(13);
        let (_, mut p) = synthetic(&mut rng, 6, 30, 0.5);
        perturb(&mut rng, &mut p, 0.5, 0.01, true);
        p.cameras[0].weight = Weight::Fixed;
        let t = crate::geometry::SimilarityTransform::new(
            2.5,
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
            Vec3::new(4.0, -1.0, 2.0),
        );
        let mut q = p.clone();
        for c in q.cameras.iter_mut() {
            c.pose = t.apply_pose(&c.pose);
        }
        for pt in q.points.iter_mut() {
            pt.xyz = t.apply_point(&pt.xyz);
        }
        let (_, ra) = solve(&p, &LmConfig::default()).unwrap();
        let (_, rb) = solve(&q, &LmConfig::default()).unwrap();
        assert!((ra.final_cost - rb.final_cost).abs() <= 1e-7 * ra.final_cost.max(1.0), "{} {}", ra.final_cost, rb.final_cost);
    }

    #[test]
    fn validation_rejects_underconstrained_point() {
        let mut rng = crate::rng::seeded(14);
        let (mut p, _) = synthetic(&mut rng, 2, 5, 0.0);
        p.residuals.retain(|r| !(r.point == 0 && r.camera == 1));
        assert!(matches!(p.validate(), Err(BundleError::InvalidProblem(_))));
    }
}
