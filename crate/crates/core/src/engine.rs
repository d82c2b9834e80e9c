//! Sequential on-the-fly reconstruction loop.
//!
//! Each frame is fully processed before the next one starts:
//!
//! 1. query the retrieval index for similar images, then insert the frame;
//! 2. match keypoints against every candidate and verify each pair;
//! 3. register into existing submaps by PnP (a second success records a
//!    shared image), or pool the frame and try to seed a new submap from
//!    the best verified pool pair;
//! 4. triangulate new tracks, run the weighted local bundle adjustment over
//!    the association tree, and drop outlier observations;
//! 5. fuse submap pairs whose shared-image count reached the threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{build_tree, compute_weights, Weight};
use crate::bundle::LmConfig;
use crate::geometry::{
    pnp_ransac, project, triangulate_multiview_ransac, two_view_verify, CameraIntrinsics, PnpConfig, Pose, Track,
    TrackObservation, TriangulationConfig, TwoViewConfig, Vec2, Vec3,
};
use crate::retrieval::{GlobalDescriptor, HnswIndex, HnswParams};
use crate::rng::{derive_seed, seeded};
use crate::submap::{
    adjust_global, adjust_local, LocalBaConfig, MergeConfig, MergeEvent, SharedImage, SharedLink, Submap,
    SubmapRegistry,
};
use crate::{AgentId, ImageId, PointId, SubmapId};

/// Keypoint id carried by oracle blocks for keypoints with no true 3D point.
pub const OUTLIER_SENTINEL: u64 = u64::MAX;

/// One incoming image: keypoints, global descriptor and optional extras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePacket {
    pub agent_id: AgentId,
    pub frame_id: u32,
    pub timestamp: f64,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<[f32; 2]>,
    /// Raw global descriptor; normalized on ingest.
    pub descriptor: Vec<f32>,
    /// Ground-truth point id per keypoint (synthetic streams only).
    pub oracle: Option<Vec<u64>>,
    /// Per-keypoint local descriptors, `keypoints.len() * dim` values.
    pub keypoint_descriptors: Option<KeypointDescriptors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointDescriptors {
    pub dim: u32,
    pub values: Vec<f32>,
}

impl FramePacket {
    pub fn image_id(&self) -> ImageId {
        ImageId::from_agent_frame(self.agent_id, self.frame_id)
    }

    pub fn keypoint(&self, i: usize) -> Vec2 {
        let [x, y] = self.keypoints[i];
        Vec2::new(x as f64, y as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid packet: {0}")]
    InvalidPacket(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Matcher {
    /// Matches keypoints by their ground-truth point ids. Keypoints carrying
    /// the outlier sentinel are paired with a random keypoint of the other
    /// image with probability `mismatch_rate`.
    Oracle { mismatch_rate: f64 },
    /// Mutual nearest neighbors over keypoint descriptors with a ratio test.
    DescriptorNn { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GlobalBaPolicy {
    FinalOnly,
    EveryK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub seed: u64,
    pub descriptor_dim: usize,
    pub top_n: usize,
    pub hnsw: HnswParams,
    pub matcher: Matcher,
    pub two_view: TwoViewConfig,
    pub pnp: PnpConfig,
    pub triangulation: TriangulationConfig,
    pub local_ba: LocalBaConfig,
    pub global_lm: LmConfig,
    pub merge: MergeConfig,
    pub global_ba: GlobalBaPolicy,
    /// Minimum median triangulation angle of a seed pair.
    pub init_min_angle_deg: f64,
    /// Observations reprojecting worse than this are dropped after each adjustment.
    pub outlier_px: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            descriptor_dim: crate::retrieval::DEFAULT_DIM,
            top_n: 30,
            hnsw: HnswParams::default(),
            matcher: Matcher::Oracle { mismatch_rate: 1.0 },
            two_view: TwoViewConfig::default(),
            pnp: PnpConfig::default(),
            triangulation: TriangulationConfig::default(),
            local_ba: LocalBaConfig::default(),
            global_lm: LmConfig::default(),
            merge: MergeConfig::default(),
            global_ba: GlobalBaPolicy::FinalOnly,
            init_min_angle_deg: 2.0,
            outlier_px: 4.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if self.descriptor_dim == 0 || self.top_n == 0 {
            return bad("descriptor_dim and top_n must be positive".into());
        }
        if let Err(e) = self.hnsw.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.merge.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.local_ba.lm.validate().and(self.global_lm.validate()) {
            return bad(e.to_string());
        }
        if self.local_ba.depth == 0 || self.local_ba.fanout == 0 {
            return bad("association depth and fanout must be positive".into());
        }
        if let GlobalBaPolicy::EveryK(0) = self.global_ba {
            return bad("global BA interval must be positive".into());
        }
        match self.matcher {
            Matcher::Oracle { mismatch_rate } if !(0.0..=1.0).contains(&mismatch_rate) => bad("mismatch rate must lie in [0, 1]".into()),
            Matcher::DescriptorNn { ratio } if !(ratio > 0.0 && ratio <= 1.0) => bad("ratio must lie in (0, 1]".into()),
            _ => Ok(()),
        }
    }
}

/// Everything kept about an ingested frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image_id: ImageId,
    pub timestamp: f64,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<Vec2>,
    pub oracle: Option<Vec<u64>>,
    /// Oracle point id to keypoint index (sentinels excluded).
    oracle_index: BTreeMap<u64, u32>,
    pub keypoint_descriptors: Option<KeypointDescriptors>,
}

/// A verified pair, stored with `a < b`.
#[derive(Debug, Clone, PartialEq)]
struct PairInfo {
    /// Inlier keypoint matches `(kp in a, kp in b)`.
    matches: Vec<(u32, u32)>,
    /// Pose of b with a at the origin (unit baseline).
    relative: Pose,
    degenerate: bool,
    median_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FrameOutcome {
    Registered { submap: SubmapId, shared_with: Vec<SubmapId> },
    Initialized { submap: SubmapId },
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    pub image_id: ImageId,
    pub outcome: FrameOutcome,
    pub candidates: usize,
    pub verified: usize,
    pub new_tracks: usize,
    /// Pooled frames registered as a consequence of this frame.
    pub pool_registered: usize,
    pub merges: Vec<MergeEvent>,
    pub local_mre: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub image_id: ImageId,
    pub wall_time_s: f64,
    pub registered: bool,
    pub submap_count: usize,
    pub registered_total: usize,
    pub local_mre: Option<f64>,
    pub retrieval_precision: Option<f64>,
    pub retrieval_recall: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    pub frames: Vec<FrameMetrics>,
    pub merges: Vec<MergeEvent>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub frames: usize,
    pub registered: usize,
    pub submap_count: usize,
    pub points: usize,
    /// Mean reprojection error of the online reconstruction, before the final global adjustment.
    pub mre: f64,
    /// Mean over frames of the reprojection error after each local adjustment.
    pub amre: f64,
    /// Mean reprojection error after the final global adjustment.
    pub mfre: f64,
    /// Mean track length.
    pub mtl: f64,
    pub mean_frame_time_s: f64,
    pub max_frame_time_s: f64,
    pub retrieval_precision: Option<f64>,
    pub retrieval_recall: Option<f64>,
    pub merges: usize,
}

pub struct Engine {
    config: EngineConfig,
    index: HnswIndex,
    frames: BTreeMap<ImageId, FrameRecord>,
    pairs: BTreeMap<(ImageId, ImageId), PairInfo>,
    partners: BTreeMap<ImageId, BTreeSet<ImageId>>,
    registry: SubmapRegistry,
    pool: BTreeSet<ImageId>,
    agent_intrinsics: BTreeMap<AgentId, CameraIntrinsics>,
    /// Sorted oracle ids per frame, for retrieval quality.
    oracle_sets: BTreeMap<ImageId, Vec<u64>>,
    next_point: u64,
    metrics: EngineMetrics,
}

fn retrieve_in(index: &HnswIndex, top_n: usize, submap: &Submap, q: ImageId, k: usize) -> Vec<(ImageId, f64)> {
    let Some(d) = index.descriptor(q) else { return Vec::new() };
    index
        .query_top_n(d, top_n.max(k + 1))
        .unwrap_or_default()
        .into_iter()
        .filter(|(id, _)| *id != q && submap.contains(*id))
        .take(k)
        .map(|(id, dist)| (id, dist as f64))
        .collect()
}

fn sorted_intersection(a: &[u64], b: &[u64]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let index = HnswIndex::new(config.descriptor_dim, config.hnsw).map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        let registry = SubmapRegistry::new(config.merge.n_si);
        Ok(Engine {
            config,
            index,
            frames: BTreeMap::new(),
            pairs: BTreeMap::new(),
            partners: BTreeMap::new(),
            registry,
            pool: BTreeSet::new(),
            agent_intrinsics: BTreeMap::new(),
            oracle_sets: BTreeMap::new(),
            next_point: 0,
            metrics: EngineMetrics::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn registry(&self) -> &SubmapRegistry {
        &self.registry
    }

    pub fn index(&self) -> &HnswIndex {
        &self.index
    }

    pub fn frames(&self) -> &BTreeMap<ImageId, FrameRecord> {
        &self.frames
    }

    pub fn pool(&self) -> &BTreeSet<ImageId> {
        &self.pool
    }

    pub fn metrics(&self) -> &EngineMetrics {
        &self.metrics
    }

    pub fn agent_intrinsics(&self) -> &BTreeMap<AgentId, CameraIntrinsics> {
        &self.agent_intrinsics
    }

    fn validate_packet(&self, p: &FramePacket) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidPacket(m));
        let id = p.image_id();
        if self.frames.contains_key(&id) {
            return bad(format!("duplicate image {id}"));
        }
        if let Err(e) = p.intrinsics.validate() {
            return bad(e.to_string());
        }
        if let Some(k) = self.agent_intrinsics.get(&p.agent_id) {
            if *k != p.intrinsics {
                return bad(format!("agent {} changed intrinsics", p.agent_id));
            }
        }
        if p.descriptor.len() != self.config.descriptor_dim {
            return bad(format!("descriptor has {} values, expected {}", p.descriptor.len(), self.config.descriptor_dim));
        }
        if !p.timestamp.is_finite() {
            return bad("non-finite timestamp".into());
        }
        let (w, h) = (p.intrinsics.width as f32, p.intrinsics.height as f32);
        if p.keypoints.iter().any(|[x, y]| !(x.is_finite() && y.is_finite() && *x >= 0.0 && *y >= 0.0 && *x <= w && *y <= h)) {
            return bad("keypoint outside the image".into());
        }
        if p.oracle.as_ref().is_some_and(|o| o.len() != p.keypoints.len()) {
            return bad("oracle block length differs from keypoint count".into());
        }
        if let Some(kd) = &p.keypoint_descriptors {
            if kd.values.len() != kd.dim as usize * p.keypoints.len() {
                return bad("keypoint descriptor block has the wrong size".into());
            }
        }
        if p.keypoints.len() > u32::MAX as usize {
            return bad("too many keypoints".into());
        }
        Ok(())
    }

    /// Runs the full pipeline on one frame.
    pub fn process_frame(&mut self, packet: &FramePacket) -> Result<FrameEvent, EngineError> {
        let start = Instant::now();
        self.validate_packet(packet)?;
        let id = packet.image_id();
        let descriptor = GlobalDescriptor::new(id, packet.descriptor.clone())
            .map_err(|e| EngineError::InvalidPacket(e.to_string()))?;
        let candidates: Vec<ImageId> = self
            .index
            .query_top_n(descriptor.values(), self.config.top_n)
            .map_err(|e| EngineError::InvalidPacket(e.to_string()))?
            .into_iter()
            .map(|(c, _)| c)
            .collect();
        self.index.insert(&descriptor).map_err(|e| EngineError::InvalidPacket(e.to_string()))?;
        self.agent_intrinsics.entry(packet.agent_id).or_insert(packet.intrinsics);

        let oracle_index = packet
            .oracle
            .as_ref()
            .map(|o| {
                o.iter().enumerate().filter(|(_, &pid)| pid != OUTLIER_SENTINEL).map(|(i, &pid)| (pid, i as u32)).collect()
            })
            .unwrap_or_default();
        self.frames.insert(
            id,
            FrameRecord {
                image_id: id,
                timestamp: packet.timestamp,
                intrinsics: packet.intrinsics,
                keypoints: (0..packet.keypoints.len()).map(|i| packet.keypoint(i)).collect(),
                oracle: packet.oracle.clone(),
                oracle_index,
                keypoint_descriptors: packet.keypoint_descriptors.clone(),
            },
        );
        let (precision, recall) = self.retrieval_quality(id, packet, &candidates);

        let mut verified = 0;
        for &c in &candidates {
            if self.verify_pair(id, c) {
                verified += 1;
            }
        }

        let mut merges = Vec::new();
        let mut new_tracks = 0;
        let mut local_mre = None;
        let outcome = match self.try_register(id) {
            Some((submap, shared_with)) => {
                new_tracks += self.triangulate_new(id, submap);
                local_mre = self.local_adjust(id, submap);
                FrameOutcome::Registered { submap, shared_with }
            }
            None => {
                self.pool.insert(id);
                match self.initialize_submap() {
                    Some(s) => {
                        new_tracks += self.registry.submaps[&s].tracks.len();
                        FrameOutcome::Initialized { submap: s }
                    }
                    None => FrameOutcome::Pooled,
                }
            }
        };
        let pool_registered = if matches!(outcome, FrameOutcome::Pooled) { 0 } else { self.retry_pool() };

        merges.extend(self.fuse());
        if let GlobalBaPolicy::EveryK(k) = self.config.global_ba {
            if self.registry.registered_count() % k == 0 && !matches!(outcome, FrameOutcome::Pooled) {
                self.global_adjust_all();
            }
        }

        let wall_time_s = start.elapsed().as_secs_f64();
        let registered = self.registry.submap_of(id).is_some();
        self.metrics.frames.push(FrameMetrics {
            image_id: id,
            wall_time_s,
            registered,
            submap_count: self.registry.len(),
            registered_total: self.registry.registered_count(),
            local_mre,
            retrieval_precision: precision,
            retrieval_recall: recall,
        });
        self.metrics.merges.extend(merges.iter().cloned());
        Ok(FrameEvent {
            image_id: id,
            outcome,
            candidates: candidates.len(),
            verified,
            new_tracks,
            pool_registered,
            merges,
            local_mre,
            wall_time_s,
        })
    }

    fn retrieval_quality(&mut self, id: ImageId, packet: &FramePacket, candidates: &[ImageId]) -> (Option<f64>, Option<f64>) {
        let Some(oracle) = &packet.oracle else { return (None, None) };
        let mut ids: Vec<u64> = oracle.iter().copied().filter(|&p| p != OUTLIER_SENTINEL).collect();
        ids.sort_unstable();
        ids.dedup();
        let truth: BTreeSet<ImageId> =
            self.oracle_sets.iter().filter(|(_, s)| sorted_intersection(&ids, s) > 50).map(|(k, _)| *k).collect();
        self.oracle_sets.insert(id, ids);
        let hits = candidates.iter().filter(|c| truth.contains(c)).count();
        let precision = (!candidates.is_empty()).then(|| hits as f64 / candidates.len() as f64);
        let recall = (!truth.is_empty()).then(|| hits as f64 / truth.len().min(self.config.top_n) as f64);
        (precision, recall)
    }

    fn match_keypoints(&self, a: ImageId, b: ImageId) -> Vec<(u32, u32)> {
        let (fa, fb) = (&self.frames[&a], &self.frames[&b]);
        match self.config.matcher {
            Matcher::Oracle { mismatch_rate } => {
                let (Some(oa), Some(_)) = (&fa.oracle, &fb.oracle) else { return Vec::new() };
                let mut out: Vec<(u32, u32)> = oa
                    .iter()
                    .enumerate()
                    .filter_map(|(i, pid)| fb.oracle_index.get(pid).map(|&j| (i as u32, j)))
                    .collect();
                if mismatch_rate > 0.0 && !fb.keypoints.is_empty() {
                    use rand::Rng;
                    let mut rng = seeded(derive_seed(self.config.seed, &[0x4d49_534d, a.0, b.0]));
                    for (i, pid) in oa.iter().enumerate() {
                        if *pid == OUTLIER_SENTINEL && rng.random_bool(mismatch_rate) {
                            out.push((i as u32, rng.random_range(0..fb.keypoints.len() as u32)));
                        }
                    }
                    let mut used = BTreeSet::new();
                    out.retain(|m| used.insert(m.1));
                }
                out
            }
            Matcher::DescriptorNn { ratio } => {
                let (Some(da), Some(db)) = (&fa.keypoint_descriptors, &fb.keypoint_descriptors) else { return Vec::new() };
                if da.dim != db.dim || da.dim == 0 {
                    return Vec::new();
                }
                let dim = da.dim as usize;
                let nn = |from: &KeypointDescriptors, to: &KeypointDescriptors, i: usize| -> Option<(usize, f32, f32)> {
                    let q = &from.values[i * dim..(i + 1) * dim];
                    let mut best = (usize::MAX, f32::INFINITY, f32::INFINITY);
                    for (j, c) in to.values.chunks_exact(dim).enumerate() {
                        let d = crate::retrieval::l2_sq(q, c);
                        if d < best.1 {
                            best = (j, d, best.1);
                        } else if d < best.2 {
                            best.2 = d;
                        }
                    }
                    (best.0 != usize::MAX).then_some(best)
                };
                let mut out = Vec::new();
                for i in 0..fa.keypoints.len() {
                    let Some((j, d1, d2)) = nn(da, db, i) else { continue };
                    if (d1 as f64).sqrt() > ratio * (d2 as f64).sqrt() {
                        continue;
                    }
                    if nn(db, da, j).is_some_and(|(back, _, _)| back == i) {
                        out.push((i as u32, j as u32));
                    }
                }
                out
            }
        }
    }

    /// Matches and verifies `(new, other)`; stores the pair when accepted.
    fn verify_pair(&mut self, new: ImageId, other: ImageId) -> bool {
        let (a, b) = if new < other { (new, other) } else { (other, new) };
        if self.pairs.contains_key(&(a, b)) {
            return true;
        }
        let matches = self.match_keypoints(a, b);
        if matches.len() <= self.config.two_view.min_inliers {
            return false;
        }
        let (fa, fb) = (&self.frames[&a], &self.frames[&b]);
        let corr: Vec<(Vec2, Vec2)> =
            matches.iter().map(|&(i, j)| (fa.keypoints[i as usize], fb.keypoints[j as usize])).collect();
        let cfg = TwoViewConfig { seed: derive_seed(self.config.seed, &[0x3256, a.0, b.0]), ..self.config.two_view };
        let Ok(g) = two_view_verify(&corr, &fa.intrinsics, &fb.intrinsics, &cfg) else { return false };
        if !(g.inliers.len() > self.config.two_view.min_inliers) {
            return false;
        }
        // Degenerate pairs still carry valid correspondences for registration;
        // only seeding a submap requires a non-degenerate pair.
        let info = PairInfo {
            matches: g.inliers.iter().map(|&k| matches[k]).collect(),
            relative: g.relative,
            degenerate: g.degenerate,
            median_angle_deg: g.median_triangulation_angle_deg,
        };
        self.pairs.insert((a, b), info);
        self.partners.entry(a).or_default().insert(b);
        self.partners.entry(b).or_default().insert(a);
        true
    }

    /// Inlier matches of a verified pair as `(kp in x, kp in y)`.
    fn pair_matches(&self, x: ImageId, y: ImageId) -> Vec<(u32, u32)> {
        if x < y {
            self.pairs.get(&(x, y)).map(|p| p.matches.clone()).unwrap_or_default()
        } else {
            self.pairs.get(&(y, x)).map(|p| p.matches.iter().map(|&(a, b)| (b, a)).collect()).unwrap_or_default()
        }
    }

    /// 2D-3D correspondences of `id` against one submap, voted over all
    /// verified partners registered there.
    fn correspondences(&self, id: ImageId, submap: &Submap) -> Vec<(u32, PointId)> {
        let mut votes: BTreeMap<u32, BTreeMap<PointId, usize>> = BTreeMap::new();
        for partner in self.partners.get(&id).into_iter().flatten() {
            let Some(reg) = submap.images.get(partner) else { continue };
            for (kn, kc) in self.pair_matches(id, *partner) {
                if let Some(pid) = reg.keypoint_tracks.get(&kc) {
                    *votes.entry(kn).or_default().entry(*pid).or_default() += 1;
                }
            }
        }
        let mut used = BTreeSet::new();
        let mut out = Vec::new();
        for (kn, v) in votes {
            let (pid, _) = v.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap();
            if used.insert(pid) {
                out.push((kn, pid));
            }
        }
        out
    }

    fn pnp_into(&self, id: ImageId, submap: &Submap) -> Option<(Pose, Vec<(u32, PointId)>)> {
        let corr = self.correspondences(id, submap);
        if corr.len() < self.config.pnp.min_inliers {
            return None;
        }
        let frame = &self.frames[&id];
        let pts: Vec<(Vec2, Vec3)> =
            corr.iter().map(|(kn, pid)| (frame.keypoints[*kn as usize], submap.tracks[pid].xyz)).collect();
        let cfg = PnpConfig { seed: derive_seed(self.config.seed, &[0x504e, id.0, submap.id.0 as u64]), ..self.config.pnp };
        let r = pnp_ransac(&pts, &frame.intrinsics, &cfg).ok()?;
        Some((r.pose, r.inliers.iter().map(|&i| corr[i]).collect()))
    }

    /// Registers `id` into the submap with the most verified partners that
    /// accepts it; further successes are recorded as shared images.
    fn try_register(&mut self, id: ImageId) -> Option<(SubmapId, Vec<SubmapId>)> {
        let mut counts: BTreeMap<SubmapId, usize> = BTreeMap::new();
        for p in self.partners.get(&id).into_iter().flatten() {
            if let Some(s) = self.registry.submap_of(*p) {
                *counts.entry(s).or_default() += 1;
            }
        }
        let mut order: Vec<(SubmapId, usize)> = counts.into_iter().collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut primary: Option<(SubmapId, Pose, Vec<(u32, PointId)>)> = None;
        let mut shared_with = Vec::new();
        for (sid, _) in order {
            let submap = &self.registry.submaps[&sid];
            let Some((pose, inliers)) = self.pnp_into(id, submap) else { continue };
            match &primary {
                None => primary = Some((sid, pose, inliers)),
                Some((psid, ppose, pinl)) => {
                    let frame = &self.frames[&id];
                    let theirs: BTreeMap<u32, PointId> = inliers.iter().copied().collect();
                    let links = pinl
                        .iter()
                        .filter_map(|(kp, p1)| {
                            theirs.get(kp).map(|p2| SharedLink {
                                keypoint: *kp,
                                pixel: frame.keypoints[*kp as usize],
                                points: BTreeMap::from([(*psid, *p1), (sid, *p2)]),
                            })
                        })
                        .collect();
                    let shared = SharedImage {
                        image_id: id,
                        intrinsics: frame.intrinsics,
                        poses: BTreeMap::from([(*psid, *ppose), (sid, pose)]),
                        links,
                    };
                    self.registry.ledger.record_shared_image(*psid, sid, shared);
                    shared_with.push(sid);
                }
            }
        }
        let (sid, pose, inliers) = primary?;
        let frame = &self.frames[&id];
        let submap = self.registry.submaps.get_mut(&sid).unwrap();
        submap.insert_image(id, pose, frame.intrinsics);
        for (kp, pid) in inliers {
            submap.add_observation(pid, id, TrackObservation { keypoint: kp, pixel: frame.keypoints[kp as usize] });
        }
        self.pool.remove(&id);
        Some((sid, shared_with))
    }

    /// New tracks from verified matches of `id` that are not yet linked in
    /// the submap. Returns how many were added.
    fn triangulate_new(&mut self, id: ImageId, sid: SubmapId) -> usize {
        let submap = &self.registry.submaps[&sid];
        let Some(reg) = submap.images.get(&id) else { return 0 };
        let mut groups: BTreeMap<u32, Vec<(ImageId, u32)>> = BTreeMap::new();
        let mut extend: Vec<(u32, PointId)> = Vec::new();
        for partner in self.partners.get(&id).into_iter().flatten() {
            let Some(preg) = submap.images.get(partner) else { continue };
            for (kn, kc) in self.pair_matches(id, *partner) {
                if reg.keypoint_tracks.contains_key(&kn) {
                    continue;
                }
                match preg.keypoint_tracks.get(&kc) {
                    Some(pid) => extend.push((kn, *pid)),
                    None => groups.entry(kn).or_default().push((*partner, kc)),
                }
            }
        }
        let frame = &self.frames[&id];
        let pose = reg.pose;
        let thr = self.config.triangulation.threshold_px;

        // Link to existing tracks that reproject well.
        let mut linked_now: BTreeSet<u32> = BTreeSet::new();
        let mut additions = Vec::new();
        for (kn, pid) in extend {
            if linked_now.contains(&kn) {
                continue;
            }
            let Some(t) = submap.tracks.get(&pid) else { continue };
            if t.observations.contains_key(&id) {
                continue;
            }
            let px = frame.keypoints[kn as usize];
            if project(&frame.intrinsics, &pose, &t.xyz).is_ok_and(|p| (p - px).norm() <= thr) {
                linked_now.insert(kn);
                additions.push((pid, kn, px));
            }
        }

        let mut new_tracks = Vec::new();
        for (kn, views) in groups {
            if linked_now.contains(&kn) {
                continue;
            }
            let mut obs = vec![(id, kn)];
            let mut seen = BTreeSet::from([id]);
            for (img, kp) in views {
                if seen.insert(img) && !submap.images[&img].keypoint_tracks.contains_key(&kp) {
                    obs.push((img, kp));
                }
            }
            if obs.len() < 2 {
                continue;
            }
            let rays: Vec<(Pose, CameraIntrinsics, Vec2)> = obs
                .iter()
                .map(|(img, kp)| (submap.images[img].pose, self.frames[img].intrinsics, self.frames[img].keypoints[*kp as usize]))
                .collect();
            let cfg = TriangulationConfig {
                seed: derive_seed(self.config.seed, &[0x5452, id.0, kn as u64]),
                ..self.config.triangulation
            };
            let Ok(tri) = triangulate_multiview_ransac(&rays, &cfg) else { continue };
            if !tri.inliers.contains(&0) {
                continue;
            }
            let observations: Vec<(ImageId, u32)> = tri.inliers.iter().map(|&i| obs[i]).collect();
            new_tracks.push((tri.xyz, observations));
        }

        let submap = self.registry.submaps.get_mut(&sid).unwrap();
        for (pid, kn, px) in additions {
            submap.add_observation(pid, id, TrackObservation { keypoint: kn, pixel: px });
        }
        let mut added = 0;
        for (xyz, observations) in new_tracks {
            let pid = PointId(self.next_point);
            let mut t = Track::new(pid, xyz);
            for (img, kp) in observations {
                t.observations.insert(img, TrackObservation { keypoint: kp, pixel: self.frames[&img].keypoints[kp as usize] });
            }
            if submap.add_track(t) {
                self.next_point += 1;
                added += 1;
            }
        }
        added
    }

    /// Weighted local adjustment around `root`; returns the mean reprojection
    /// error of the adjusted cameras' observations.
    fn local_adjust(&mut self, root: ImageId, sid: SubmapId) -> Option<f64> {
        let index = &self.index;
        let top_n = self.config.top_n;
        let cfg = self.config.local_ba;
        let submap = self.registry.submaps.get_mut(&sid)?;
        let tree = build_tree(root, |q, k| retrieve_in(index, top_n, submap, q, k), cfg.depth, cfg.fanout);
        let mut weights: BTreeMap<ImageId, Weight> = compute_weights(&tree).into_iter().map(|w| (w.image_id, w.weight)).collect();
        // Hold the gauge when the tree covers the whole submap without fixing anything.
        if weights.len() == submap.len() && !weights.values().any(Weight::is_fixed) {
            if let Some(anchor) = submap.images.keys().copied().find(|i| *i != root) {
                weights.insert(anchor, Weight::Fixed);
            }
        }
        if let Err(e) = adjust_local(submap, &weights, &cfg.lm, cfg.loss) {
            log::warn!("local adjustment around {root} failed: {e}");
        }
        submap.remove_outlier_observations(self.config.outlier_px);
        let free: BTreeSet<ImageId> = weights.iter().filter(|(_, w)| !w.is_fixed()).map(|(i, _)| *i).collect();
        let mut sum = 0.0;
        let mut n = 0usize;
        for t in submap.tracks.values() {
            for (img, o) in t.observations.iter().filter(|(i, _)| free.contains(i)) {
                let r = &submap.images[img];
                if let Ok(p) = project(&r.intrinsics, &r.pose, &t.xyz) {
                    sum += (p - o.pixel).norm();
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Seeds a submap from the best verified non-degenerate pool pair.
    fn initialize_submap(&mut self) -> Option<SubmapId> {
        let mut best: Option<((ImageId, ImageId), usize)> = None;
        for (&(a, b), info) in &self.pairs {
            if !self.pool.contains(&a) || !self.pool.contains(&b) {
                continue;
            }
            if info.degenerate || info.median_angle_deg < self.config.init_min_angle_deg {
                continue;
            }
            if best.is_none_or(|(_, n)| info.matches.len() > n) {
                best = Some(((a, b), info.matches.len()));
            }
        }
        let ((a, b), _) = best?;
        let info = self.pairs[&(a, b)].clone();
        let (fa, fb) = (&self.frames[&a], &self.frames[&b]);
        let pose_a = Pose::identity();
        let pose_b = info.relative;
        let mut tracks = Vec::new();
        let cfg = self.config.triangulation;
        for &(ka, kb) in &info.matches {
            let (pa, pb) = (fa.keypoints[ka as usize], fb.keypoints[kb as usize]);
            let rays = [(pose_a, fa.intrinsics, pa), (pose_b, fb.intrinsics, pb)];
            let Ok(tri) = triangulate_multiview_ransac(&rays, &TriangulationConfig { min_angle_deg: 0.5, ..cfg }) else {
                continue;
            };
            if tri.inliers.len() == 2 {
                tracks.push((tri.xyz, ka, kb, pa, pb));
            }
        }
        if tracks.len() < self.config.pnp.min_inliers {
            return None;
        }
        let sid = self.registry.create();
        let submap = self.registry.submaps.get_mut(&sid).unwrap();
        submap.insert_image(a, pose_a, fa.intrinsics);
        submap.insert_image(b, pose_b, fb.intrinsics);
        for (xyz, ka, kb, pa, pb) in tracks {
            let pid = PointId(self.next_point);
            let mut t = Track::new(pid, xyz);
            t.observations.insert(a, TrackObservation { keypoint: ka, pixel: pa });
            t.observations.insert(b, TrackObservation { keypoint: kb, pixel: pb });
            if submap.add_track(t) {
                self.next_point += 1;
            }
        }
        if let Err(e) = adjust_global(submap, a, &self.config.global_lm, self.config.local_ba.loss) {
            log::warn!("seed adjustment of submap {sid} failed: {e}");
        }
        submap.remove_outlier_observations(self.config.outlier_px);
        self.pool.remove(&a);
        self.pool.remove(&b);
        Some(sid)
    }

    /// Registers pooled frames that can now see a submap. Returns how many.
    fn retry_pool(&mut self) -> usize {
        let mut total = 0;
        loop {
            let mut progress = false;
            let pooled: Vec<ImageId> = self.pool.iter().copied().collect();
            for id in pooled {
                let linked = self.partners.get(&id).is_some_and(|ps| ps.iter().any(|p| self.registry.submap_of(*p).is_some()));
                if !linked {
                    continue;
                }
                if let Some((sid, _)) = self.try_register(id) {
                    self.triangulate_new(id, sid);
                    self.local_adjust(id, sid);
                    progress = true;
                    total += 1;
                }
            }
            if !progress {
                break;
            }
        }
        total
    }

    fn fuse(&mut self) -> Vec<MergeEvent> {
        let index = &self.index;
        let top_n = self.config.top_n;
        let retrieve = |s: &Submap, q: ImageId, k: usize| retrieve_in(index, top_n, s, q, k);
        let events = self.registry.fuse_all(&self.config.merge, &self.config.local_ba, &retrieve);
        for s in self.registry.submaps.values_mut() {
            if events.iter().any(|e| e.reference == s.id) {
                s.remove_outlier_observations(self.config.outlier_px);
            }
        }
        events
    }

    fn global_adjust_all(&mut self) {
        for s in self.registry.submaps.values_mut() {
            let Some(gauge) = s.images.keys().next().copied() else { continue };
            if let Err(e) = adjust_global(s, gauge, &self.config.global_lm, self.config.local_ba.loss) {
                log::warn!("global adjustment of submap {} failed: {e}", s.id);
            }
            s.remove_outlier_observations(self.config.outlier_px);
        }
    }

    fn mean_error_and_track_length(&self) -> (f64, f64, usize) {
        let (mut sum, mut n, mut obs, mut tracks) = (0.0, 0usize, 0usize, 0usize);
        for s in self.registry.submaps.values() {
            for e in s.reprojection_errors() {
                sum += e;
                n += 1;
            }
            for t in s.tracks.values() {
                obs += t.len();
                tracks += 1;
            }
        }
        let mre = if n > 0 { sum / n as f64 } else { 0.0 };
        let mtl = if tracks > 0 { obs as f64 / tracks as f64 } else { 0.0 };
        (mre, mtl, tracks)
    }

    /// Final fusion pass and global adjustment of every submap (the lowest
    /// image id of each submap holds the gauge).
    pub fn finalize(&mut self) -> FinalReport {
        let merges = self.fuse();
        self.metrics.merges.extend(merges);
        let (mre, _, _) = self.mean_error_and_track_length();
        self.global_adjust_all();
        let (mfre, mtl, points) = self.mean_error_and_track_length();
        let frames = &self.metrics.frames;
        let local: Vec<f64> = frames.iter().filter_map(|f| f.local_mre).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let times: Vec<f64> = frames.iter().map(|f| f.wall_time_s).collect();
        let precision: Vec<f64> = frames.iter().filter_map(|f| f.retrieval_precision).collect();
        let recall: Vec<f64> = frames.iter().filter_map(|f| f.retrieval_recall).collect();
        FinalReport {
            frames: frames.len(),
            registered: self.registry.registered_count(),
            submap_count: self.registry.len(),
            points,
            mre,
            amre: mean(&local),
            mfre,
            mtl,
            mean_frame_time_s: mean(&times),
            max_frame_time_s: times.iter().copied().fold(0.0, f64::max),
            retrieval_precision: (!precision.is_empty()).then(|| mean(&precision)),
            retrieval_recall: (!recall.is_empty()).then(|| mean(&recall)),
            merges: self.metrics.merges.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthstream::{generate, render_packets, SceneSpec};

    fn packets(frames: usize, seed: u64) -> Vec<FramePacket> {
        render_packets(&generate(&SceneSpec { seed, ..SceneSpec::single_agent(frames) }).unwrap())
    }

    #[test]
    fn first_two_frames_seed_a_submap() {
        let p = packets(40, 1);
        let mut e = Engine::new(EngineConfig::default()).unwrap();
        assert_eq!(e.process_frame(&p[0]).unwrap().outcome, FrameOutcome::Pooled);
        let ev = e.process_frame(&p[1]).unwrap();
        assert!(matches!(ev.outcome, FrameOutcome::Initialized { .. }), "{ev:?}");
        let s = e.registry().submaps.values().next().unwrap();
        assert_eq!(s.len(), 2);
        assert!(!s.tracks.is_empty());
        assert!(s.rms_reprojection_error() <= 1.0, "{}", s.rms_reprojection_error());
        s.check_invariants().unwrap();
    }

    #[test]
    fn unrelated_frame_is_pooled() {
        let p = packets(40, 2);
        let mut e = Engine::new(EngineConfig::default()).unwrap();
        e.process_frame(&p[0]).unwrap();
        e.process_frame(&p[1]).unwrap();
        // Opposite side of the orbit shares nothing with the first frames.
        let ev = e.process_frame(&p[20]).unwrap();
        assert_eq!(ev.outcome, FrameOutcome::Pooled);
        assert_eq!(e.registry().registered_count(), 2);
        assert!(e.pool().contains(&p[20].image_id()));
    }

    #[test]
    fn rejects_bad_packets() {
        let p = packets(3, 3);
        let mut e = Engine::new(EngineConfig::default()).unwrap();
        let mut bad = p[0].clone();
        bad.descriptor.pop();
        assert!(matches!(e.process_frame(&bad), Err(EngineError::InvalidPacket(_))));
        let mut bad = p[0].clone();
        bad.keypoints[0] = [-5.0, 1.0];
        assert!(e.process_frame(&bad).is_err());
        e.process_frame(&p[0]).unwrap();
        assert!(e.process_frame(&p[0]).is_err());
    }

    #[test]
    fn sequence_registers_and_tracks_stay_valid() {
        let p = packets(150, 4);
        let mut e = Engine::new(EngineConfig::default()).unwrap();
        let mut registered = 0;
        for pk in &p[..20] {
            let before = e.registry().registered_count();
            e.process_frame(pk).unwrap();
            assert!(e.registry().registered_count() >= before);
            registered = e.registry().registered_count();
            for s in e.registry().submaps.values() {
                s.check_invariants().unwrap();
            }
        }
        assert!(registered >= 18, "{registered} registered");
        let report = e.finalize();
        assert_eq!(report.submap_count, 1);
        assert!(report.mfre < 1.0, "{report:?}");
    }

    #[test]
    fn empty_stream_report_is_zeroed() {
        let mut e = Engine::new(EngineConfig::default()).unwrap();
        let r = e.finalize();
        assert_eq!(r, FinalReport::default());
    }
}
