//! Camera model and multi-view estimators.
//!
//! All estimators are pure functions of their inputs; the RANSAC variants
//! take an explicit seed and are deterministic for a given seed.

mod camera;
mod pnp;
mod similarity;
mod triangulate;
mod two_view;

pub use camera::{
    back_project_ray, project, projection_jacobians, CameraIntrinsics, Observation, Pose, Track,
    TrackObservation,
};
pub use pnp::{pnp_dlt, pnp_ransac, refine_pose, PnpConfig, PnpResult};
pub use similarity::{estimate_similarity_umeyama, SimilarityTransform};
pub use triangulate::{
    triangulate_dlt, triangulate_multiview_ransac, triangulation_angle_deg, TriangulationConfig,
    TriangulationResult,
};
pub use two_view::{
    decompose_essential, fundamental_8point, homography_dlt, two_view_verify, TwoViewConfig,
    TwoViewGeometry,
};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error("no consensus model found")]
    NoConsensus,
    #[error("maximum triangulation angle {0:.3} deg is below the guard")]
    ShallowAngle(f64),
    #[error("degenerate sample")]
    DegenerateSample,
}

/// Hartley normalization of 2D points: returns the normalizing 3x3 transform
/// and the normalized points (centroid at origin, mean distance sqrt(2)).
pub(crate) fn normalize_2d(points: &[Vec2]) -> (nalgebra::Matrix3<f64>, Vec<Vec2>) {
    let n = points.len().max(1) as f64;
    let centroid = points.iter().fold(Vec2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-300 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = nalgebra::Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0);
    let normalized = points.iter().map(|p| (p - centroid) * s).collect();
    (t, normalized)
}
