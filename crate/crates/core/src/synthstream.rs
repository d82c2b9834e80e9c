//! Synthetic ground-truth worlds and the packet streams rendered from them.
//!
//! A scene is a box-shaped building with textured facades (points sampled on
//! the four walls with a little relief) surrounded by a ring of volumetric
//! clutter. Agents orbit the building on circular arcs, looking at its
//! center. Visibility is frustum + range + facade back-face culling.
//!
//! Global descriptors are signed random projections of the visible point
//! set: each point id hashes to a fixed ±1 vector and an image's descriptor
//! is the normalized sum over its visible points. Two images' cosine
//! similarity then tracks the overlap of their visible sets.

use std::collections::BTreeSet;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{FramePacket, OUTLIER_SENTINEL};
use crate::geometry::{project, CameraIntrinsics, Pose, Vec3};
use crate::retrieval::{GlobalDescriptor, DEFAULT_DIM};
use crate::rng::{derive_seed, mix64, seeded};
use crate::{AgentId, ImageId, PointId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One agent's circular arc around the scene center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: AgentId,
    pub frames: usize,
    pub radius: f64,
    pub start_angle_deg: f64,
    pub end_angle_deg: f64,
    /// Camera height oscillates between these values along the arc.
    pub height_min: f64,
    pub height_max: f64,
    /// Timestamp of the first frame, seconds.
    pub time_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Building footprint half-width and height.
    pub building_half_extent: f64,
    pub building_height: f64,
    /// Facade points per square unit.
    pub facade_density: f64,
    /// Maximum outward offset of facade points.
    pub facade_relief: f64,
    pub clutter_points: usize,
    pub clutter_inner_radius: f64,
    pub clutter_outer_radius: f64,
    pub clutter_height: f64,
    pub intrinsics: CameraIntrinsics,
    pub max_range: f64,
    /// Keypoints must project this far inside the image border.
    pub border_px: f64,
    pub sigma_px: f64,
    pub outlier_fraction: f64,
    pub descriptor_dim: usize,
    pub descriptor_jitter: f64,
    /// Seconds between consecutive frames of one agent.
    pub frame_interval: f64,
    pub agents: Vec<AgentSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::single_agent(150)
    }
}

fn default_intrinsics() -> CameraIntrinsics {
    let f = 320.0 / 30f64.to_radians().tan();
    CameraIntrinsics { fx: f, fy: f, cx: 320.0, cy: 240.0, width: 640, height: 480 }
}

impl SceneSpec {
    fn base(agents: Vec<AgentSpec>) -> Self {
        SceneSpec {
            seed: 0,
            building_half_extent: 25.0,
            building_height: 24.0,
            facade_density: 0.5,
            facade_relief: 2.0,
            clutter_points: 1200,
            clutter_inner_radius: 30.0,
            clutter_outer_radius: 42.0,
            clutter_height: 15.0,
            intrinsics: default_intrinsics(),
            max_range: 60.0,
            border_px: 2.0,
            sigma_px: 0.5,
            outlier_fraction: 0.1,
            descriptor_dim: DEFAULT_DIM,
            descriptor_jitter: 0.01,
            frame_interval: 2.5,
            agents,
        }
    }

    /// One agent on a full orbit of radius 50 (scene diameter 100).
    pub fn single_agent(frames: usize) -> Self {
        SceneSpec::base(vec![AgentSpec {
            agent_id: 0,
            frames,
            radius: 50.0,
            start_angle_deg: 0.0,
            end_angle_deg: 360.0 * (frames.saturating_sub(1)) as f64 / frames.max(1) as f64,
            height_min: 8.0,
            height_max: 12.0,
            time_offset: 0.0,
        }])
    }

    /// Two agents starting a quarter turn apart and converging on a common
    /// stretch of the orbit near the end of the run.
    pub fn two_agent(frames_per_agent: usize) -> Self {
        let mut spec = SceneSpec::base(vec![
            AgentSpec {
                agent_id: 0,
                frames: frames_per_agent,
                radius: 50.0,
                start_angle_deg: 0.0,
                end_angle_deg: 170.0,
                height_min: 8.0,
                height_max: 12.0,
                time_offset: 0.0,
            },
            AgentSpec {
                agent_id: 1,
                frames: frames_per_agent,
                radius: 50.0,
                start_angle_deg: 270.0,
                end_angle_deg: 140.0,
                height_min: 9.0,
                height_max: 11.0,
                time_offset: 0.0,
            },
        ]);
        spec.agents[1].time_offset = 0.5 * spec.frame_interval;
        spec
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.agents.is_empty() || self.agents.iter().any(|a| a.frames == 0) {
            return bad("every scene needs at least one agent with at least one frame");
        }
        let ids: BTreeSet<AgentId> = self.agents.iter().map(|a| a.agent_id).collect();
        if ids.len() != self.agents.len() {
            return bad("duplicate agent ids");
        }
        if self.intrinsics.validate().is_err() {
            return bad("invalid intrinsics");
        }
        if !(self.building_half_extent > 0.0 && self.building_height > 0.0) {
            return bad("building dimensions must be positive");
        }
        if self.clutter_points > 0 && !(self.clutter_inner_radius < self.clutter_outer_radius) {
            return bad("clutter ring radii out of order");
        }
        let min_radius = self.clutter_outer_radius.max(self.building_half_extent * 2f64.sqrt()) + 1.0;
        if self.agents.iter().any(|a| a.radius <= min_radius) {
            return bad("camera orbit passes through the scene geometry");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) || self.sigma_px < 0.0 || self.descriptor_dim == 0 {
            return bad("noise or descriptor parameters out of range");
        }
        Ok(())
    }

    /// Distance across the region spanned by camera orbits.
    pub fn diameter(&self) -> f64 {
        2.0 * self.agents.iter().map(|a| a.radius).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointKind {
    /// Facade point with its outward wall normal index (0: +x, 1: +y, 2: -x, 3: -y).
    Facade(u8),
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub id: PointId,
    pub xyz: Vec3,
    pub kind: PointKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFrame {
    pub image_id: ImageId,
    pub agent_id: AgentId,
    pub frame_id: u32,
    pub timestamp: f64,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// Sorted ids of visible points.
    pub visible: Vec<PointId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub points: Vec<ScenePoint>,
    /// Ordered by timestamp, then agent, then frame.
    pub frames: Vec<SyntheticFrame>,
}

fn wall_normal(k: u8) -> Vec3 {
    match k {
        0 => Vec3::new(1.0, 0.0, 0.0),
        1 => Vec3::new(0.0, 1.0, 0.0),
        2 => Vec3::new(-1.0, 0.0, 0.0),
        _ => Vec3::new(0.0, -1.0, 0.0),
    }
}

fn sample_points(spec: &SceneSpec) -> Vec<ScenePoint> {
    let mut rng = seeded(derive_seed(spec.seed, &[1]));
    let h = spec.building_half_extent;
    let per_wall = (spec.facade_density * 2.0 * h * spec.building_height).round() as usize;
    let mut out = Vec::new();
    for wall in 0..4u8 {
        let n = wall_normal(wall);
        let tangent = Vec3::new(-n.y, n.x, 0.0);
        for _ in 0..per_wall {
            let u = rng.random_range(-h..h);
            let z = rng.random_range(0.0..spec.building_height);
            let relief = rng.random_range(0.0..=spec.facade_relief);
            let xyz = n * (h + relief) + tangent * u + Vec3::new(0.0, 0.0, z);
            out.push(ScenePoint { id: PointId(out.len() as u64), xyz, kind: PointKind::Facade(wall) });
        }
    }
    let (r0, r1) = (spec.clutter_inner_radius, spec.clutter_outer_radius);
    for _ in 0..spec.clutter_points {
        // Uniform over the annulus area.
        let r = rng.random_range(r0 * r0..r1 * r1).sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let z = rng.random_range(0.0..spec.clutter_height);
        out.push(ScenePoint { id: PointId(out.len() as u64), xyz: Vec3::new(r * a.cos(), r * a.sin(), z), kind: PointKind::Clutter });
    }
    out
}

fn agent_pose(spec: &SceneSpec, a: &AgentSpec, k: usize) -> Pose {
    let f = if a.frames > 1 { k as f64 / (a.frames - 1) as f64 } else { 0.0 };
    let ang = (a.start_angle_deg + f * (a.end_angle_deg - a.start_angle_deg)).to_radians();
    let mid = 0.5 * (a.height_min + a.height_max);
    let amp = 0.5 * (a.height_max - a.height_min);
    let height = mid + amp * (3.0 * std::f64::consts::TAU * f).sin();
    let center = Vec3::new(a.radius * ang.cos(), a.radius * ang.sin(), height);
    let target = Vec3::new(0.0, 0.0, 0.45 * spec.building_height);
    Pose::look_at(&center, &target, &Vec3::new(0.0, 0.0, -1.0))
}

pub fn is_visible(spec: &SceneSpec, pose: &Pose, point: &ScenePoint) -> bool {
    let center = pose.center();
    let d = (point.xyz - center).norm();
    if d > spec.max_range {
        return false;
    }
    if let PointKind::Facade(w) = point.kind {
        if (center - point.xyz).dot(&wall_normal(w)) <= 0.0 {
            return false;
        }
    }
    let pc = pose.transform_point(&point.xyz);
    if pc.z < 0.5 {
        return false;
    }
    match project(&spec.intrinsics, pose, &point.xyz) {
        Ok(px) => {
            let b = spec.border_px;
            px.x >= b && px.y >= b && px.x <= spec.intrinsics.width as f64 - b && px.y <= spec.intrinsics.height as f64 - b
        }
        Err(_) => false,
    }
}

/// Builds points, trajectories and visibility. Deterministic in `spec.seed`.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let points = sample_points(spec);
    let mut frames = Vec::new();
    for a in &spec.agents {
        for k in 0..a.frames {
            let pose = agent_pose(spec, a, k);
            let visible: Vec<PointId> = points.iter().filter(|p| is_visible(spec, &pose, p)).map(|p| p.id).collect();
            if visible.len() < 20 {
                return Err(SynthError::InvalidSpec(format!(
                    "agent {} frame {k} sees only {} points",
                    a.agent_id,
                    visible.len()
                )));
            }
            frames.push(SyntheticFrame {
                image_id: ImageId::from_agent_frame(a.agent_id, k as u32),
                agent_id: a.agent_id,
                frame_id: k as u32,
                timestamp: a.time_offset + k as f64 * spec.frame_interval,
                pose,
                intrinsics: spec.intrinsics,
                visible,
            });
        }
    }
    frames.sort_by(|x, y| x.timestamp.total_cmp(&y.timestamp).then(x.agent_id.cmp(&y.agent_id)).then(x.frame_id.cmp(&y.frame_id)));
    Ok(SyntheticScene { spec: spec.clone(), points, frames })
}

/// Signed random projection of a visible point set onto `dim` dimensions,
/// plus optional Gaussian jitter seeded by the image id.
pub fn make_descriptor(
    image_id: ImageId,
    visible: &[PointId],
    dim: usize,
    jitter: f64,
    seed: u64,
) -> Result<GlobalDescriptor, SynthError> {
    if visible.is_empty() {
        return Err(SynthError::InvalidArgument("empty visible set".into()));
    }
    if dim == 0 {
        return Err(SynthError::InvalidArgument("descriptor dimension must be positive".into()));
    }
    let mut acc = vec![0i64; dim];
    for id in visible {
        let base = derive_seed(seed, &[id.0]);
        for (chunk, vals) in acc.chunks_mut(64).enumerate() {
            let bits = mix64(base ^ (chunk as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            for (b, v) in vals.iter_mut().enumerate() {
                *v += if (bits >> b) & 1 == 1 { 1 } else { -1 };
            }
        }
    }
    let norm = acc.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt().max(1.0);
    let mut values: Vec<f64> = acc.iter().map(|&v| v as f64 / norm).collect();
    if jitter > 0.0 {
        let mut rng = seeded(derive_seed(seed, &[0x6a17, image_id.0]));
        let n = Normal::new(0.0, jitter).map_err(|e| SynthError::InvalidArgument(e.to_string()))?;
        for v in values.iter_mut() {
            *v += n.sample(&mut rng);
        }
    }
    GlobalDescriptor::new(image_id, values.into_iter().map(|v| v as f32).collect())
        .map_err(|e| SynthError::InvalidArgument(e.to_string()))
}

/// Noisy keypoints, oracle ids and descriptors for every frame, in stream order.
pub fn render_packets(scene: &SyntheticScene) -> Vec<FramePacket> {
    let spec = &scene.spec;
    scene
        .frames
        .iter()
        .map(|f| {
            let mut rng = seeded(derive_seed(spec.seed, &[2, f.image_id.0]));
            let noise = Normal::new(0.0, spec.sigma_px.max(f64::MIN_POSITIVE)).unwrap();
            let (w, h) = (spec.intrinsics.width as f64, spec.intrinsics.height as f64);
            let mut kps: Vec<([f32; 2], u64)> = f
                .visible
                .iter()
                .map(|pid| {
                    let p = &scene.points[pid.0 as usize];
                    if rng.random_bool(spec.outlier_fraction) {
                        let px = [rng.random_range(0.0..w) as f32, rng.random_range(0.0..h) as f32];
                        return (px, OUTLIER_SENTINEL);
                    }
                    let mut px = project(&f.intrinsics, &f.pose, &p.xyz).expect("visible points project");
                    if spec.sigma_px > 0.0 {
                        px += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                    }
                    ([px.x.clamp(0.0, w) as f32, px.y.clamp(0.0, h) as f32], pid.0)
                })
                .collect();
            kps.shuffle(&mut rng);
            let descriptor = make_descriptor(f.image_id, &f.visible, spec.descriptor_dim, spec.descriptor_jitter, spec.seed)
                .expect("frames see at least 20 points");
            FramePacket {
                agent_id: f.agent_id,
                frame_id: f.frame_id,
                timestamp: f.timestamp,
                intrinsics: f.intrinsics,
                keypoints: kps.iter().map(|k| k.0).collect(),
                descriptor: descriptor.values().to_vec(),
                oracle: Some(kps.iter().map(|k| k.1).collect()),
                keypoint_descriptors: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub shared: usize,
    pub jaccard: f64,
    pub true_overlap: bool,
}

/// Visible-set overlap of two frames; "true" when more than 50 points are shared.
pub fn overlap(a: &SyntheticFrame, b: &SyntheticFrame) -> Overlap {
    let (mut i, mut j, mut shared) = (0, 0, 0);
    while i < a.visible.len() && j < b.visible.len() {
        match a.visible[i].cmp(&b.visible[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.visible.len() + b.visible.len() - shared;
    Overlap {
        shared,
        jaccard: if union == 0 { 0.0 } else { shared as f64 / union as f64 },
        true_overlap: shared > 50,
    }
}

impl SyntheticScene {
    pub fn frame(&self, image_id: ImageId) -> Option<&SyntheticFrame> {
        self.frames.iter().find(|f| f.image_id == image_id)
    }

    pub fn point(&self, id: PointId) -> Option<&ScenePoint> {
        self.points.get(id.0 as usize).filter(|p| p.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec { seed: 3, ..SceneSpec::single_agent(10) }
    }

    #[test]
    fn every_frame_sees_enough_points() {
        let scene = generate(&small_spec()).unwrap();
        assert_eq!(scene.frames.len(), 10);
        for f in &scene.frames {
            assert!(f.visible.len() >= 20, "{} sees {}", f.image_id, f.visible.len());
        }
        for w in scene.frames.windows(2) {
            assert!(overlap(&w[0], &w[1]).shared >= 1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small_spec()).unwrap(), generate(&small_spec()).unwrap());
        let scene = generate(&small_spec()).unwrap();
        assert_eq!(render_packets(&scene), render_packets(&scene));
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = small_spec();
        s.agents[0].radius = 20.0;
        assert!(matches!(generate(&s), Err(SynthError::InvalidSpec(_))));
        let mut s = small_spec();
        s.facade_density = 0.0;
        s.clutter_points = 0;
        assert!(matches!(generate(&s), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn noiseless_keypoints_equal_projections() {
        let mut s = small_spec();
        s.sigma_px = 0.0;
        s.outlier_fraction = 0.0;
        let scene = generate(&s).unwrap();
        let packets = render_packets(&scene);
        for (f, p) in scene.frames.iter().zip(&packets) {
            let oracle = p.oracle.as_ref().unwrap();
            for (kp, id) in p.keypoints.iter().zip(oracle) {
                let x = project(&f.intrinsics, &f.pose, &scene.points[*id as usize].xyz).unwrap();
                assert_eq!(kp[0], x.x as f32);
                assert_eq!(kp[1], x.y as f32);
            }
        }
    }

    #[test]
    fn outlier_fraction_matches() {
        let mut s = small_spec();
        s.outlier_fraction = 0.3;
        let scene = generate(&s).unwrap();
        let packets = render_packets(&scene);
        let total: usize = packets.iter().map(|p| p.keypoints.len()).sum();
        let outliers: usize =
            packets.iter().map(|p| p.oracle.as_ref().unwrap().iter().filter(|&&i| i == OUTLIER_SENTINEL).count()).sum();
        let frac = outliers as f64 / total as f64;
        let sd = (0.3 * 0.7 / total as f64).sqrt();
        assert!((frac - 0.3).abs() < 4.0 * sd, "fraction {frac}");
    }

    #[test]
    fn two_agent_overlap_appears_late() {
        let scene = generate(&SceneSpec::two_agent(60)).unwrap();
        let a: Vec<&SyntheticFrame> = scene.frames.iter().filter(|f| f.agent_id == 0).collect();
        let b: Vec<&SyntheticFrame> = scene.frames.iter().filter(|f| f.agent_id == 1).collect();
        for fa in &a[..10] {
            for fb in &b[..10] {
                assert_eq!(overlap(fa, fb).shared, 0);
            }
        }
        let late = b[55..].iter().filter(|fb| a.iter().any(|fa| overlap(fa, fb).shared > 50)).count();
        assert!(late >= 4, "{late} late frames overlap");
        assert!(scene.frames.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn identical_sets_give_identical_descriptors() {
        let ids: Vec<PointId> = (0..100).map(PointId).collect();
        let a = make_descriptor(ImageId(1), &ids, 256, 0.0, 7).unwrap();
        let b = make_descriptor(ImageId(2), &ids, 256, 0.0, 7).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.distance(&b), 0.0);
        assert!(make_descriptor(ImageId(1), &[], 256, 0.0, 7).is_err());
    }

    #[test]
    fn disjoint_sets_are_near_orthogonal() {
        let a: Vec<PointId> = (0..1000).map(PointId).collect();
        let b: Vec<PointId> = (1000..2000).map(PointId).collect();
        let da = make_descriptor(ImageId(1), &a, 256, 0.0, 7).unwrap();
        let db = make_descriptor(ImageId(2), &b, 256, 0.0, 7).unwrap();
        let d = da.distance(&db) as f64;
        // Cosine of two independent sign vectors has sd 1/sqrt(256).
        assert!((d - 2f64.sqrt()).abs() < 0.15, "distance {d}");
    }

    #[test]
    fn subset_is_closer_than_disjoint() {
        let b: Vec<PointId> = (0..1000).map(PointId).collect();
        let a: Vec<PointId> = (0..900).map(PointId).collect();
        let c: Vec<PointId> = (5000..5900).map(PointId).collect();
        let da = make_descriptor(ImageId(1), &a, 256, 0.01, 7).unwrap();
        let db = make_descriptor(ImageId(2), &b, 256, 0.01, 7).unwrap();
        let dc = make_descriptor(ImageId(3), &c, 256, 0.01, 7).unwrap();
        assert!(da.distance(&db) < da.distance(&dc));
    }

    #[test]
    fn overlap_predicts_descriptor_distance() {
        let scene = generate(&SceneSpec { seed: 5, ..SceneSpec::single_agent(60) }).unwrap();
        let descs: Vec<GlobalDescriptor> = scene
            .frames
            .iter()
            .map(|f| make_descriptor(f.image_id, &f.visible, 256, 0.01, 5).unwrap())
            .collect();
        let mut rng = seeded(9);
        let (mut checked, mut ok) = (0, 0);
        for _ in 0..20_000 {
            if checked == 300 {
                break;
            }
            let i = rng.random_range(0..60);
            let j = (i + rng.random_range(1..3)) % 60;
            let k = rng.random_range(0..60);
            let oij = overlap(&scene.frames[i], &scene.frames[j]);
            let oik = overlap(&scene.frames[i], &scene.frames[k]);
            if oij.jaccard <= 0.5 || oik.shared > 0 {
                continue;
            }
            checked += 1;
            if descs[i].distance(&descs[j]) < descs[i].distance(&descs[k]) {
                ok += 1;
            }
        }
        assert!(checked >= 100);
        assert!(ok as f64 >= 0.95 * checked as f64, "{ok}/{checked}");
    }
}
