//! Submaps, the shared-image ledger, and submap fusion.
//!
//! Every registered image lives in exactly one submap. When a frame also
//! registers into a second submap, the ledger records it for that pair
//! together with both poses and the keypoints that matched 3D points in
//! both. Once a pair has `n_si` such images, a RANSAC search over triples
//! of shared camera centers estimates the similarity between the two
//! frames, scoring each hypothesis by bidirectional reprojection of the
//! common points. A successful estimate folds the smaller submap into the
//! larger (or the reverse, if that fails) and relaxes the seam with a
//! weighted local bundle adjustment rooted at the shared images.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{build_tree, compute_weights, Weight};
use crate::bundle::{solve, solve_weighted_local, BaCamera, BaPoint, BaProblem, BundleError, LmConfig, Loss, ResidualBlock, SolveReport};
use crate::geometry::{
    estimate_similarity_umeyama, project, CameraIntrinsics, Pose, SimilarityTransform, Track, TrackObservation, Vec2,
    Vec3,
};
use crate::rng::{derive_seed, sample_indices, seeded};
use crate::{AgentId, ImageId, PointId, SubmapId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SubmapError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{got} shared images, need at least 3")]
    InsufficientShared { got: usize },
    #[error("merge failed: {0}")]
    MergeFailed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredImage {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// Keypoint index to the track it observes.
    pub keypoint_tracks: BTreeMap<u32, PointId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submap {
    pub id: SubmapId,
    pub created_at: u64,
    pub images: BTreeMap<ImageId, RegisteredImage>,
    pub tracks: BTreeMap<PointId, Track>,
    pub agents: BTreeSet<AgentId>,
}

impl Submap {
    pub fn new(id: SubmapId, created_at: u64) -> Self {
        Submap { id, created_at, images: BTreeMap::new(), tracks: BTreeMap::new(), agents: BTreeSet::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn contains(&self, image_id: ImageId) -> bool {
        self.images.contains_key(&image_id)
    }

    pub fn pose(&self, image_id: ImageId) -> Option<&Pose> {
        self.images.get(&image_id).map(|i| &i.pose)
    }

    pub fn insert_image(&mut self, image_id: ImageId, pose: Pose, intrinsics: CameraIntrinsics) {
        self.agents.insert(image_id.agent());
        self.images.insert(image_id, RegisteredImage { pose, intrinsics, keypoint_tracks: BTreeMap::new() });
    }

    /// Adds a track; observations of unknown images or of keypoints that
    /// already observe another track are skipped. Returns false (and adds
    /// nothing) if fewer than two observations survive.
    pub fn add_track(&mut self, track: Track) -> bool {
        let obs: Vec<(ImageId, TrackObservation)> = track
            .observations
            .iter()
            .filter(|(img, o)| self.images.get(img).is_some_and(|i| !i.keypoint_tracks.contains_key(&o.keypoint)))
            .map(|(i, o)| (*i, *o))
            .collect();
        if obs.len() < 2 || self.tracks.contains_key(&track.point_id) {
            return false;
        }
        let mut t = Track::new(track.point_id, track.xyz);
        for (img, o) in obs {
            self.images.get_mut(&img).unwrap().keypoint_tracks.insert(o.keypoint, track.point_id);
            t.observations.insert(img, o);
        }
        self.tracks.insert(track.point_id, t);
        true
    }

    /// Links a keypoint of a registered image to an existing track.
    pub fn add_observation(&mut self, point_id: PointId, image_id: ImageId, obs: TrackObservation) -> bool {
        let Some(track) = self.tracks.get_mut(&point_id) else { return false };
        let Some(img) = self.images.get_mut(&image_id) else { return false };
        if track.observations.contains_key(&image_id) || img.keypoint_tracks.contains_key(&obs.keypoint) {
            return false;
        }
        img.keypoint_tracks.insert(obs.keypoint, point_id);
        track.observations.insert(image_id, obs);
        true
    }

    pub fn remove_observation(&mut self, point_id: PointId, image_id: ImageId) {
        if let Some(track) = self.tracks.get_mut(&point_id) {
            if let Some(o) = track.observations.remove(&image_id) {
                if let Some(img) = self.images.get_mut(&image_id) {
                    img.keypoint_tracks.remove(&o.keypoint);
                }
            }
        }
    }

    pub fn remove_track(&mut self, point_id: PointId) {
        if let Some(track) = self.tracks.remove(&point_id) {
            for (img, o) in &track.observations {
                if let Some(i) = self.images.get_mut(img) {
                    i.keypoint_tracks.remove(&o.keypoint);
                }
            }
        }
    }

    /// Removes tracks with fewer than two observations; returns how many.
    pub fn prune_short_tracks(&mut self) -> usize {
        let short: Vec<PointId> = self.tracks.iter().filter(|(_, t)| t.len() < 2).map(|(id, _)| *id).collect();
        for id in &short {
            self.remove_track(*id);
        }
        short.len()
    }

    /// Drops observations whose reprojection error exceeds `max_px` (or
    /// that fall behind the camera), then prunes short tracks. Returns the
    /// number of removed observations.
    pub fn remove_outlier_observations(&mut self, max_px: f64) -> usize {
        let mut bad = Vec::new();
        for (pid, t) in &self.tracks {
            for (img, o) in &t.observations {
                let i = &self.images[img];
                let ok = project(&i.intrinsics, &i.pose, &t.xyz).is_ok_and(|p| (p - o.pixel).norm() <= max_px);
                if !ok {
                    bad.push((*pid, *img));
                }
            }
        }
        for (pid, img) in &bad {
            self.remove_observation(*pid, *img);
        }
        self.prune_short_tracks();
        bad.len()
    }

    pub fn apply_similarity(&mut self, t: &SimilarityTransform) {
        for img in self.images.values_mut() {
            img.pose = t.apply_pose(&img.pose);
        }
        for track in self.tracks.values_mut() {
            track.xyz = t.apply_point(&track.xyz);
        }
    }

    /// Pixel reprojection error of every observation, in track order.
    pub fn reprojection_errors(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.tracks.values() {
            for (img, o) in &t.observations {
                let i = &self.images[img];
                match project(&i.intrinsics, &i.pose, &t.xyz) {
                    Ok(p) => out.push((p - o.pixel).norm()),
                    Err(_) => out.push(f64::INFINITY),
                }
            }
        }
        out
    }

    pub fn mean_reprojection_error(&self) -> f64 {
        let e = self.reprojection_errors();
        if e.is_empty() {
            0.0
        } else {
            e.iter().sum::<f64>() / e.len() as f64
        }
    }

    pub fn rms_reprojection_error(&self) -> f64 {
        let e = self.reprojection_errors();
        if e.is_empty() {
            0.0
        } else {
            (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt()
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for (pid, t) in &self.tracks {
            if t.len() < 2 {
                return Err(format!("track {pid} has {} observations", t.len()));
            }
            for (img, o) in &t.observations {
                let Some(i) = self.images.get(img) else {
                    return Err(format!("track {pid} observes unregistered image {img}"));
                };
                if i.keypoint_tracks.get(&o.keypoint) != Some(pid) {
                    return Err(format!("image {img} keypoint {} is not linked back to track {pid}", o.keypoint));
                }
            }
        }
        for (img, i) in &self.images {
            for (kp, pid) in &i.keypoint_tracks {
                let linked = self.tracks.get(pid).and_then(|t| t.observations.get(img)).is_some_and(|o| o.keypoint == *kp);
                if !linked {
                    return Err(format!("image {img} keypoint {kp} links to missing observation of {pid}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub n_si: usize,
    pub min_ior: f64,
    pub max_re: f64,
    pub num_trials: usize,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig { n_si: 3, min_ior: 0.25, max_re: 8.0, num_trials: 64, seed: 0 }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), SubmapError> {
        if self.n_si < 3 || !(self.min_ior > 0.0 && self.min_ior <= 1.0) || !(self.max_re > 0.0) || self.num_trials == 0 {
            return Err(SubmapError::InvalidArgument(format!("invalid merge configuration {self:?}")));
        }
        Ok(())
    }
}

/// A keypoint of a shared image that matched a 3D point in each submap.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedLink {
    pub keypoint: u32,
    pub pixel: Vec2,
    pub points: BTreeMap<SubmapId, PointId>,
}

/// An image registered in two submaps, with its pose in each.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedImage {
    pub image_id: ImageId,
    pub intrinsics: CameraIntrinsics,
    pub poses: BTreeMap<SubmapId, Pose>,
    pub links: Vec<SharedLink>,
}

/// A shared image seen from a (source, reference) orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedView {
    pub image_id: ImageId,
    pub intrinsics: CameraIntrinsics,
    pub pose_src: Pose,
    pub pose_ref: Pose,
    /// (keypoint, pixel, source point, reference point)
    pub links: Vec<(u32, Vec2, PointId, PointId)>,
}

fn pair_key(a: SubmapId, b: SubmapId) -> (SubmapId, SubmapId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairEntry {
    pub images: BTreeMap<ImageId, SharedImage>,
    /// Shared-image count at the last fusion attempt.
    pub last_attempt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedImageLedger {
    pub n_si: usize,
    pub pairs: BTreeMap<(SubmapId, SubmapId), PairEntry>,
}

impl SharedImageLedger {
    pub fn new(n_si: usize) -> Self {
        SharedImageLedger { n_si, pairs: BTreeMap::new() }
    }

    /// Records a shared image for the pair; returns whether the pair has
    /// reached the trigger threshold. Recording an image twice counts once.
    pub fn record_shared_image(&mut self, a: SubmapId, b: SubmapId, shared: SharedImage) -> bool {
        let entry = self.pairs.entry(pair_key(a, b)).or_default();
        entry.images.entry(shared.image_id).or_insert(shared);
        entry.images.len() >= self.n_si
    }

    pub fn count(&self, a: SubmapId, b: SubmapId) -> usize {
        self.pairs.get(&pair_key(a, b)).map_or(0, |e| e.images.len())
    }

    /// Pairs at or above the threshold that gained images since their last attempt.
    pub fn triggered_pairs(&self) -> Vec<(SubmapId, SubmapId)> {
        self.pairs
            .iter()
            .filter(|(_, e)| e.images.len() >= self.n_si && e.images.len() > e.last_attempt)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn views(&self, src: SubmapId, reference: SubmapId) -> Vec<SharedView> {
        let Some(entry) = self.pairs.get(&pair_key(src, reference)) else { return Vec::new() };
        entry
            .images
            .values()
            .filter_map(|s| {
                Some(SharedView {
                    image_id: s.image_id,
                    intrinsics: s.intrinsics,
                    pose_src: *s.poses.get(&src)?,
                    pose_ref: *s.poses.get(&reference)?,
                    links: s
                        .links
                        .iter()
                        .filter_map(|l| Some((l.keypoint, l.pixel, *l.points.get(&src)?, *l.points.get(&reference)?)))
                        .collect(),
                })
            })
            .collect()
    }

    /// Rewrites every entry of `removed` into the frame and ids of `kept`
    /// after `removed` was folded into `kept` by `t`.
    pub fn remap(&mut self, removed: SubmapId, kept: SubmapId, t: &SimilarityTransform, point_map: &BTreeMap<PointId, PointId>) {
        self.pairs.remove(&pair_key(removed, kept));
        let moved: Vec<(SubmapId, SubmapId)> =
            self.pairs.keys().filter(|(a, b)| *a == removed || *b == removed).copied().collect();
        for key in moved {
            let entry = self.pairs.remove(&key).unwrap();
            let other = if key.0 == removed { key.1 } else { key.0 };
            let target = self.pairs.entry(pair_key(kept, other)).or_default();
            for (id, mut s) in entry.images {
                if let Some(p) = s.poses.remove(&removed) {
                    s.poses.insert(kept, t.apply_pose(&p));
                }
                for l in s.links.iter_mut() {
                    if let Some(p) = l.points.remove(&removed) {
                        l.points.insert(kept, point_map.get(&p).copied().unwrap_or(p));
                    }
                }
                target.images.entry(id).or_insert(s);
            }
            target.last_attempt = 0;
        }
    }
}

/// Views for images registered in both submaps (links are keypoints that
/// observe a track in each).
pub fn shared_views_between(source: &Submap, reference: &Submap) -> Vec<SharedView> {
    source
        .images
        .iter()
        .filter_map(|(id, s)| {
            let r = reference.images.get(id)?;
            let links = s
                .keypoint_tracks
                .iter()
                .filter_map(|(kp, ps)| {
                    let pr = r.keypoint_tracks.get(kp)?;
                    let pixel = source.tracks[ps].observations[id].pixel;
                    Some((*kp, pixel, *ps, *pr))
                })
                .collect();
            Some(SharedView { image_id: *id, intrinsics: s.intrinsics, pose_src: s.pose, pose_ref: r.pose, links })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeEstimate {
    /// Maps source coordinates into reference coordinates.
    pub transform: SimilarityTransform,
    pub inlier_images: Vec<ImageId>,
    pub shared_images: usize,
}

struct Scored {
    inlier_images: Vec<ImageId>,
    /// (source point, reference point) pairs passing both reprojection tests.
    inlier_points: Vec<(Vec3, Vec3)>,
}

fn score(source: &Submap, reference: &Submap, views: &[SharedView], t: &SimilarityTransform, config: &MergeConfig) -> Scored {
    let inv = t.inverse();
    let mut inlier_images = Vec::new();
    let mut inlier_points = Vec::new();
    for v in views {
        let mut common = 0usize;
        let mut pts = Vec::new();
        for (_, pixel, ps, pr) in &v.links {
            let (Some(xs), Some(xr)) = (source.tracks.get(ps), reference.tracks.get(pr)) else { continue };
            common += 1;
            let re12 = project(&v.intrinsics, &v.pose_ref, &t.apply_point(&xs.xyz)).map(|p| (p - pixel).norm());
            let re21 = project(&v.intrinsics, &v.pose_src, &inv.apply_point(&xr.xyz)).map(|p| (p - pixel).norm());
            if let (Ok(a), Ok(b)) = (re12, re21) {
                if a <= config.max_re && b <= config.max_re {
                    pts.push((xs.xyz, xr.xyz));
                }
            }
        }
        if common > 0 && pts.len() as f64 / common as f64 >= config.min_ior {
            inlier_images.push(v.image_id);
            inlier_points.extend(pts);
        }
    }
    Scored { inlier_images, inlier_points }
}

/// RANSAC over triples of shared camera centers. The winning hypothesis is
/// refined by a least-squares fit over the inlier images' centers and their
/// consistent common points, and kept only if that does not lose inlier images.
pub fn estimate_merge_transform(
    source: &Submap,
    reference: &Submap,
    views: &[SharedView],
    config: &MergeConfig,
) -> Result<MergeEstimate, SubmapError> {
    config.validate()?;
    if views.len() < 3 {
        return Err(SubmapError::InsufficientShared { got: views.len() });
    }
    let mut rng = seeded(derive_seed(config.seed, &[source.id.0 as u64, reference.id.0 as u64, views.len() as u64]));
    let mut best: Option<(SimilarityTransform, Scored)> = None;
    for _ in 0..config.num_trials {
        let sample = sample_indices(&mut rng, views.len(), 3);
        let src: Vec<Vec3> = sample.iter().map(|&i| views[i].pose_src.center()).collect();
        let dst: Vec<Vec3> = sample.iter().map(|&i| views[i].pose_ref.center()).collect();
        let Ok(t) = estimate_similarity_umeyama(&src, &dst) else { continue };
        let s = score(source, reference, views, &t, config);
        if best.as_ref().is_none_or(|b| s.inlier_images.len() > b.1.inlier_images.len()) {
            best = Some((t, s));
        }
    }
    let Some((mut t, mut s)) = best else {
        return Err(SubmapError::MergeFailed("every sample was degenerate".into()));
    };
    if s.inlier_images.len() < 3 {
        return Err(SubmapError::MergeFailed(format!("{} inlier images", s.inlier_images.len())));
    }
    for _ in 0..3 {
        let (mut src, mut dst): (Vec<Vec3>, Vec<Vec3>) = s.inlier_points.iter().copied().unzip();
        for v in views.iter().filter(|v| s.inlier_images.contains(&v.image_id)) {
            src.push(v.pose_src.center());
            dst.push(v.pose_ref.center());
        }
        let Ok(refined) = estimate_similarity_umeyama(&src, &dst) else { break };
        let rs = score(source, reference, views, &refined, config);
        if rs.inlier_images.len() < s.inlier_images.len() {
            break;
        }
        let converged = rs.inlier_images == s.inlier_images && rs.inlier_points.len() == s.inlier_points.len();
        t = refined;
        s = rs;
        if converged {
            break;
        }
    }
    Ok(MergeEstimate { transform: t, inlier_images: s.inlier_images, shared_images: views.len() })
}

/// Folds `source` into `reference` using `t` (source to reference
/// coordinates). Reference poses win for images present in both. Tracks
/// linked through at least two shared images are unified. Returns the
/// merged submap and the mapping of unified source point ids.
pub fn merge(
    reference: &Submap,
    source: &Submap,
    t: &SimilarityTransform,
    views: &[SharedView],
) -> (Submap, BTreeMap<PointId, PointId>) {
    let mut merged = reference.clone();
    merged.agents.extend(source.agents.iter().copied());
    let ref_pose: BTreeMap<ImageId, Pose> = views.iter().map(|v| (v.image_id, v.pose_ref)).collect();
    let mut taken: BTreeSet<ImageId> = BTreeSet::new();
    for (id, img) in &source.images {
        if merged.images.contains_key(id) {
            continue;
        }
        let pose = ref_pose.get(id).copied().unwrap_or_else(|| t.apply_pose(&img.pose));
        merged.insert_image(*id, pose, img.intrinsics);
        taken.insert(*id);
    }

    let mut support: BTreeMap<(PointId, PointId), BTreeSet<ImageId>> = BTreeMap::new();
    for v in views {
        for (_, _, ps, pr) in &v.links {
            if source.tracks.contains_key(ps) && reference.tracks.contains_key(pr) {
                support.entry((*ps, *pr)).or_default().insert(v.image_id);
            }
        }
    }
    let mut ranked: Vec<((PointId, PointId), usize)> =
        support.into_iter().map(|(k, v)| (k, v.len())).filter(|(_, n)| *n >= 2).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut point_map: BTreeMap<PointId, PointId> = BTreeMap::new();
    let mut used_ref: BTreeSet<PointId> = BTreeSet::new();
    for ((ps, pr), _) in ranked {
        if point_map.contains_key(&ps) || used_ref.contains(&pr) {
            continue;
        }
        point_map.insert(ps, pr);
        used_ref.insert(pr);
    }

    for (pid, track) in &source.tracks {
        let target = point_map.get(pid).copied().unwrap_or(*pid);
        let obs: Vec<(ImageId, TrackObservation)> =
            track.observations.iter().filter(|(img, _)| taken.contains(img)).map(|(i, o)| (*i, *o)).collect();
        if merged.tracks.contains_key(&target) {
            for (img, o) in obs {
                merged.add_observation(target, img, o);
            }
        } else {
            let mut nt = Track::new(target, t.apply_point(&track.xyz));
            nt.observations = obs.into_iter().collect();
            merged.add_track(nt);
        }
    }
    (merged, point_map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalBaConfig {
    pub depth: usize,
    pub fanout: usize,
    pub lm: LmConfig,
    pub loss: Loss,
}

impl Default for LocalBaConfig {
    fn default() -> Self {
        LocalBaConfig {
            depth: crate::association::DEFAULT_DEPTH,
            fanout: crate::association::DEFAULT_FANOUT,
            lm: LmConfig::local(),
            loss: Loss::Huber { delta: 2.0 },
        }
    }
}

/// Builds the bundle problem over the weighted images: every track seen by
/// a non-fixed weighted image is included, and any other image observing
/// those tracks enters as a fixed camera.
pub fn build_problem(submap: &Submap, weights: &BTreeMap<ImageId, Weight>, loss: Loss) -> BaProblem {
    let free: BTreeSet<ImageId> = weights.iter().filter(|(_, w)| !w.is_fixed()).map(|(i, _)| *i).collect();
    let mut cam_index: BTreeMap<ImageId, usize> = BTreeMap::new();
    let mut cameras = Vec::new();
    let mut points = Vec::new();
    let mut residuals = Vec::new();
    let mut camera_for = |img: ImageId, cameras: &mut Vec<BaCamera>| -> usize {
        *cam_index.entry(img).or_insert_with(|| {
            let r = &submap.images[&img];
            cameras.push(BaCamera {
                image_id: img,
                pose: r.pose,
                intrinsics: r.intrinsics,
                weight: weights.get(&img).copied().unwrap_or(Weight::Fixed),
            });
            cameras.len() - 1
        })
    };
    for id in weights.keys() {
        if submap.images.contains_key(id) {
            camera_for(*id, &mut cameras);
        }
    }
    for (pid, track) in &submap.tracks {
        if !track.observations.keys().any(|i| free.contains(i)) {
            continue;
        }
        let pi = points.len();
        points.push(BaPoint { point_id: *pid, xyz: track.xyz, fixed: false });
        for (img, o) in &track.observations {
            let ci = camera_for(*img, &mut cameras);
            residuals.push(ResidualBlock { camera: ci, point: pi, measured: o.pixel });
        }
    }
    BaProblem { cameras, points, residuals, loss }
}

fn write_back(submap: &mut Submap, problem: &BaProblem) {
    for c in &problem.cameras {
        if !c.weight.is_fixed() {
            submap.images.get_mut(&c.image_id).unwrap().pose = c.pose;
        }
    }
    for p in &problem.points {
        if !p.fixed {
            submap.tracks.get_mut(&p.point_id).unwrap().xyz = p.xyz;
        }
    }
}

/// Weighted local adjustment. Returns `None` when nothing is free.
pub fn adjust_local(
    submap: &mut Submap,
    weights: &BTreeMap<ImageId, Weight>,
    lm: &LmConfig,
    loss: Loss,
) -> Result<Option<SolveReport>, BundleError> {
    let problem = build_problem(submap, weights, loss);
    if problem.points.is_empty() || problem.cameras.iter().all(|c| c.weight.is_fixed()) {
        return Ok(None);
    }
    let (out, report) = solve_weighted_local(&problem, lm)?;
    write_back(submap, &out);
    Ok(Some(report))
}

/// Adjusts every camera and point, holding `gauge` fixed.
pub fn adjust_global(submap: &mut Submap, gauge: ImageId, lm: &LmConfig, loss: Loss) -> Result<Option<SolveReport>, BundleError> {
    let weights: BTreeMap<ImageId, Weight> = submap
        .images
        .keys()
        .map(|id| (*id, if *id == gauge { Weight::Fixed } else { Weight::Finite(1.0) }))
        .collect();
    let problem = build_problem(submap, &weights, loss);
    if problem.points.is_empty() || problem.cameras.len() < 2 {
        return Ok(None);
    }
    let (out, report) = solve(&problem, lm)?;
    write_back(submap, &out);
    Ok(Some(report))
}

/// Per-image weights from association trees rooted at each of `roots`.
/// An image reached from several roots keeps its shallowest placement.
pub fn tree_weights<F>(submap: &Submap, roots: &[ImageId], retrieve: &F, depth: usize, fanout: usize) -> BTreeMap<ImageId, Weight>
where
    F: Fn(&Submap, ImageId, usize) -> Vec<(ImageId, f64)>,
{
    let mut best: BTreeMap<ImageId, (usize, Weight)> = BTreeMap::new();
    for root in roots {
        let tree = build_tree(*root, |q, k| retrieve(submap, q, k), depth, fanout);
        for w in compute_weights(&tree) {
            let better = match best.get(&w.image_id) {
                None => true,
                Some((layer, cur)) => {
                    w.layer < *layer
                        || (w.layer == *layer && matches!((w.weight, cur), (Weight::Finite(a), Weight::Finite(b)) if a > *b))
                }
            };
            if better {
                best.insert(w.image_id, (w.layer, w.weight));
            }
        }
    }
    best.into_iter().map(|(k, (_, w))| (k, w)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeDirection {
    SmallerIntoLarger,
    LargerIntoSmaller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub source: SubmapId,
    pub reference: SubmapId,
    pub direction: MergeDirection,
    pub shared_images: usize,
    pub inlier_images: usize,
    /// Source-to-reference transform.
    pub scale: f64,
    /// Quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl MergeEvent {
    pub fn transform(&self) -> SimilarityTransform {
        let [w, x, y, z] = self.rotation;
        SimilarityTransform {
            scale: self.scale,
            rotation: nalgebra::UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, x, y, z)),
            translation: Vec3::from(self.translation),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmapRegistry {
    pub submaps: BTreeMap<SubmapId, Submap>,
    pub ledger: SharedImageLedger,
    next_id: u32,
}

impl SubmapRegistry {
    pub fn new(n_si: usize) -> Self {
        SubmapRegistry { submaps: BTreeMap::new(), ledger: SharedImageLedger::new(n_si), next_id: 0 }
    }

    pub fn create(&mut self) -> SubmapId {
        let id = SubmapId(self.next_id);
        self.next_id += 1;
        self.submaps.insert(id, Submap::new(id, id.0 as u64));
        id
    }

    pub fn len(&self) -> usize {
        self.submaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.submaps.is_empty()
    }

    pub fn submap_of(&self, image_id: ImageId) -> Option<SubmapId> {
        self.submaps.values().find(|s| s.contains(image_id)).map(|s| s.id)
    }

    pub fn registered_count(&self) -> usize {
        self.submaps.values().map(Submap::len).sum()
    }

    /// Attempts to fuse one triggered pair, smaller into larger first.
    pub fn attempt_fuse<F>(
        &mut self,
        pair: (SubmapId, SubmapId),
        config: &MergeConfig,
        seam: &LocalBaConfig,
        retrieve: &F,
    ) -> Option<MergeEvent>
    where
        F: Fn(&Submap, ImageId, usize) -> Vec<(ImageId, f64)>,
    {
        let key = pair_key(pair.0, pair.1);
        let count = self.ledger.count(key.0, key.1);
        if let Some(e) = self.ledger.pairs.get_mut(&key) {
            e.last_attempt = count;
        }
        let (a, b) = (self.submaps.get(&key.0)?, self.submaps.get(&key.1)?);
        // Smaller by image count; on a tie the newer submap counts as smaller.
        let (small, large) = if (a.len(), std::cmp::Reverse(a.id)) <= (b.len(), std::cmp::Reverse(b.id)) {
            (key.0, key.1)
        } else {
            (key.1, key.0)
        };
        for (src, dst, direction) in
            [(small, large, MergeDirection::SmallerIntoLarger), (large, small, MergeDirection::LargerIntoSmaller)]
        {
            let views = self.ledger.views(src, dst);
            let (s, r) = (&self.submaps[&src], &self.submaps[&dst]);
            let Ok(est) = estimate_merge_transform(s, r, &views, config) else { continue };
            let (mut merged, point_map) = merge(r, s, &est.transform, &views);
            let roots: Vec<ImageId> = views.iter().map(|v| v.image_id).filter(|id| merged.contains(*id)).collect();
            let weights = tree_weights(&merged, &roots, retrieve, seam.depth, seam.fanout);
            if let Err(e) = adjust_local(&mut merged, &weights, &seam.lm, seam.loss) {
                log::warn!("seam adjustment after merging {src} into {dst} failed: {e}");
            }
            self.submaps.remove(&src);
            self.submaps.insert(dst, merged);
            self.ledger.remap(src, dst, &est.transform, &point_map);
            let q = est.transform.rotation.quaternion();
            return Some(MergeEvent {
                source: src,
                reference: dst,
                direction,
                shared_images: est.shared_images,
                inlier_images: est.inlier_images.len(),
                scale: est.transform.scale,
                rotation: [q.w, q.i, q.j, q.k],
                translation: est.transform.translation.into(),
            });
        }
        None
    }

    /// Fuses triggered pairs until none remains.
    pub fn fuse_all<F>(&mut self, config: &MergeConfig, seam: &LocalBaConfig, retrieve: &F) -> Vec<MergeEvent>
    where
        F: Fn(&Submap, ImageId, usize) -> Vec<(ImageId, f64)>,
    {
        let mut events = Vec::new();
        while let Some(pair) = self.ledger.triggered_pairs().first().copied() {
            if let Some(ev) = self.attempt_fuse(pair, config, seam, retrieve) {
                events.push(ev);
            }
        }
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }

    /// Cameras on a ring around a cloud; every camera sees every point.
    fn world(rng: &mut crate::rng::Rng, n_images: usize, n_points: usize) -> (Vec<Pose>, Vec<Vec3>) {
        let poses = (0..n_images)
            .map(|i| {
                let a = i as f64 * 0.15;
                let c = Vec3::new(12.0 * a.sin(), rng.random_range(-1.0..1.0), -12.0 * a.cos());
                Pose::look_at(&c, &Vec3::zeros(), &Vec3::new(0.0, 1.0, 0.0))
            })
            .collect();
        let pts = (0..n_points)
            .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        (poses, pts)
    }

    fn build_submap(
        rng: &mut crate::rng::Rng,
        id: u32,
        images: &[usize],
        poses: &[Pose],
        pts: &[Vec3],
        sigma: f64,
        frame: &SimilarityTransform,
    ) -> Submap {
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut s = Submap::new(SubmapId(id), id as u64);
        for &i in images {
            s.insert_image(ImageId(i as u64), frame.apply_pose(&poses[i]), k());
        }
        for (pi, x) in pts.iter().enumerate() {
            let mut t = Track::new(PointId(pi as u64), frame.apply_point(x));
            for &i in images {
                let mut px = project(&k(), &poses[i], x).unwrap();
                if sigma > 0.0 {
                    px += Vec2::new(noise.sample(rng), noise.sample(rng));
                }
                t.observations.insert(ImageId(i as u64), TrackObservation { keypoint: pi as u32, pixel: px });
            }
            s.add_track(t);
        }
        s
    }

    fn known_transform() -> SimilarityTransform {
        SimilarityTransform::new(1.7, UnitQuaternion::from_euler_angles(0.2, -0.4, 0.9), Vec3::new(3.0, -2.0, 5.0))
    }

    fn shared_image(id: u64, a: SubmapId, b: SubmapId) -> SharedImage {
        SharedImage {
            image_id: ImageId(id),
            intrinsics: k(),
            poses: BTreeMap::from([(a, Pose::identity()), (b, Pose::identity())]),
            links: Vec::new(),
        }
    }

    #[test]
    fn ledger_trigger_threshold() {
        let mut l = SharedImageLedger::new(3);
        let (a, b) = (SubmapId(0), SubmapId(1));
        assert!(!l.record_shared_image(a, b, shared_image(1, a, b)));
        assert!(!l.record_shared_image(b, a, shared_image(2, a, b)));
        assert!(!l.record_shared_image(a, b, shared_image(2, a, b)));
        assert_eq!(l.count(a, b), 2);
        assert!(l.record_shared_image(a, b, shared_image(3, a, b)));
        assert_eq!(l.triggered_pairs(), vec![(a, b)]);
    }

    #[test]
    fn noiseless_copy_recovers_transform() {
        let mut rng = crate::rng::seeded(1);
        let (poses, pts) = world(&mut rng, 8, 40);
        let idx: Vec<usize> = (0..8).collect();
        let truth = known_transform();
        let src = build_submap(&mut rng, 0, &idx, &poses, &pts, 0.0, &SimilarityTransform::identity());
        let dst = build_submap(&mut rng, 1, &idx, &poses, &pts, 0.0, &truth);
        let views = shared_views_between(&src, &dst);
        let est = estimate_merge_transform(&src, &dst, &views, &MergeConfig::default()).unwrap();
        assert!((est.transform.scale - truth.scale).abs() / truth.scale <= 1e-9);
        assert!(est.transform.rotation.angle_to(&truth.rotation) <= 1e-7);
        assert_eq!(est.inlier_images.len(), 8);
    }

    #[test]
    fn collinear_centers_fail() {
        let mut rng = crate::rng::seeded(2);
        let (_, pts) = world(&mut rng, 1, 30);
        let poses: Vec<Pose> = (0..3)
            .map(|i| Pose::look_at(&Vec3::new(i as f64 - 1.0, 0.0, -12.0), &Vec3::zeros(), &Vec3::new(0.0, 1.0, 0.0)))
            .collect();
        let idx = [0, 1, 2];
        let src = build_submap(&mut rng, 0, &idx, &poses, &pts, 0.0, &SimilarityTransform::identity());
        let dst = build_submap(&mut rng, 1, &idx, &poses, &pts, 0.0, &known_transform());
        let views = shared_views_between(&src, &dst);
        assert!(matches!(
            estimate_merge_transform(&src, &dst, &views, &MergeConfig::default()),
            Err(SubmapError::MergeFailed(_))
        ));
        assert_eq!(
            estimate_merge_transform(&src, &dst, &views[..2], &MergeConfig::default()),
            Err(SubmapError::InsufficientShared { got: 2 })
        );
    }

    #[test]
    fn noisy_six_shared_images() {
        let mut rng = crate::rng::seeded(3);
        let (poses, pts) = world(&mut rng, 12, 80);
        let a: Vec<usize> = (0..9).collect();
        let b: Vec<usize> = (3..12).collect();
        let truth = known_transform();
        let mut src = build_submap(&mut rng, 0, &a, &poses, &pts, 0.5, &SimilarityTransform::identity());
        let mut dst = build_submap(&mut rng, 1, &b, &poses, &pts, 0.5, &truth);
        for s in [&mut src, &mut dst] {
            let gauge = *s.images.keys().next().unwrap();
            adjust_global(s, gauge, &LmConfig::default(), Loss::None).unwrap();
        }
        let views = shared_views_between(&src, &dst);
        assert_eq!(views.len(), 6);
        let est = estimate_merge_transform(&src, &dst, &views, &MergeConfig::default()).unwrap();
        // Each frame is anchored at one ground-truth camera, so the adjusted
        // frames stay close to the constructed ones.
        assert!(est.transform.rotation.angle_to(&truth.rotation).to_degrees() < 0.5);
        assert!((est.transform.scale / truth.scale - 1.0).abs() < 0.01);
    }

    #[test]
    fn merge_with_self_is_idempotent() {
        let mut rng = crate::rng::seeded(4);
        let (poses, pts) = world(&mut rng, 5, 20);
        let idx: Vec<usize> = (0..5).collect();
        let s = build_submap(&mut rng, 0, &idx, &poses, &pts, 0.0, &SimilarityTransform::identity());
        let views = shared_views_between(&s, &s);
        let (m, _) = merge(&s, &s, &SimilarityTransform::identity(), &views);
        assert_eq!(m.images.len(), 5);
        assert_eq!(m.tracks.len(), 20);
        m.check_invariants().unwrap();
    }

    #[test]
    fn merge_halves_counts_and_seam() {
        let mut rng = crate::rng::seeded(5);
        let (poses, pts) = world(&mut rng, 12, 60);
        let a: Vec<usize> = (0..8).collect();
        let b: Vec<usize> = (4..12).collect();
        let truth = known_transform();
        let src = build_submap(&mut rng, 0, &a, &poses, &pts, 0.5, &SimilarityTransform::identity());
        let dst = build_submap(&mut rng, 1, &b, &poses, &pts, 0.5, &truth);
        let views = shared_views_between(&src, &dst);
        assert_eq!(views.len(), 4);
        let est = estimate_merge_transform(&src, &dst, &views, &MergeConfig::default()).unwrap();
        let (mut merged, map) = merge(&dst, &src, &est.transform, &views);
        assert_eq!(merged.len(), a.len() + b.len() - 4);
        assert_eq!(map.len(), 60);
        merged.check_invariants().unwrap();
        let pre = src.rms_reprojection_error().max(dst.rms_reprojection_error());
        let roots: Vec<ImageId> = views.iter().map(|v| v.image_id).collect();
        let all = |s: &Submap, q: ImageId, n: usize| -> Vec<(ImageId, f64)> {
            let c = s.images[&q].pose.center();
            let mut v: Vec<(ImageId, f64)> =
                s.images.iter().filter(|(i, _)| **i != q).map(|(i, r)| (*i, (r.pose.center() - c).norm())).collect();
            v.sort_by(|x, y| x.1.total_cmp(&y.1));
            v.truncate(n);
            v
        };
        let w = tree_weights(&merged, &roots, &all, 4, 3);
        adjust_local(&mut merged, &w, &LmConfig::local(), Loss::None).unwrap();
        assert!(merged.rms_reprojection_error() <= 1.5 * pre, "{} vs {pre}", merged.rms_reprojection_error());
    }

    #[test]
    fn similarity_preserves_reprojection() {
        let mut rng = crate::rng::seeded(6);
        let (poses, pts) = world(&mut rng, 5, 20);
        let idx: Vec<usize> = (0..5).collect();
        let mut s = build_submap(&mut rng, 0, &idx, &poses, &pts, 0.5, &SimilarityTransform::identity());
        let before = s.reprojection_errors();
        s.apply_similarity(&known_transform());
        for (a, b) in before.iter().zip(s.reprojection_errors()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn fuse_order_and_failure() {
        let mut rng = crate::rng::seeded(7);
        let (poses, pts) = world(&mut rng, 12, 50);
        let truth = known_transform();
        let big = build_submap(&mut rng, 0, &(0..9).collect::<Vec<_>>(), &poses, &pts, 0.0, &SimilarityTransform::identity());
        let small = build_submap(&mut rng, 1, &(6..12).collect::<Vec<_>>(), &poses, &pts, 0.0, &truth);
        let no_retrieval = |_: &Submap, _: ImageId, _: usize| -> Vec<(ImageId, f64)> { Vec::new() };

        let mut reg = SubmapRegistry::new(3);
        reg.create();
        reg.create();
        reg.submaps.insert(SubmapId(0), big.clone());
        reg.submaps.insert(SubmapId(1), small.clone());
        for v in shared_views_between(&small, &big) {
            let shared = SharedImage {
                image_id: v.image_id,
                intrinsics: v.intrinsics,
                poses: BTreeMap::from([(SubmapId(1), v.pose_src), (SubmapId(0), v.pose_ref)]),
                links: v
                    .links
                    .iter()
                    .map(|(kp, px, ps, pr)| SharedLink {
                        keypoint: *kp,
                        pixel: *px,
                        points: BTreeMap::from([(SubmapId(1), *ps), (SubmapId(0), *pr)]),
                    })
                    .collect(),
            };
            reg.ledger.record_shared_image(SubmapId(0), SubmapId(1), shared);
        }
        let mut failing = reg.clone();
        let events = reg.fuse_all(&MergeConfig::default(), &LocalBaConfig::default(), &no_retrieval);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].direction, MergeDirection::SmallerIntoLarger);
        assert_eq!(events[0].source, SubmapId(1));
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.submaps[&SubmapId(0)].len(), 12);

        // Corrupt every shared pose in the ledger: both directions fail.
        for e in failing.ledger.pairs.values_mut() {
            for s in e.images.values_mut() {
                for p in s.poses.values_mut() {
                    *p = Pose::new(p.rotation, p.translation + Vec3::new(50.0, 0.0, 0.0));
                }
            }
        }
        let before = failing.clone();
        let events = failing.fuse_all(&MergeConfig::default(), &LocalBaConfig::default(), &no_retrieval);
        assert!(events.is_empty());
        assert_eq!(failing.submaps, before.submaps);
        assert_eq!(failing.ledger.count(SubmapId(0), SubmapId(1)), 3);
        assert!(failing.ledger.triggered_pairs().is_empty());
    }

    #[test]
    fn outlier_observations_are_removed() {
        let mut rng = crate::rng::seeded(8);
        let (poses, pts) = world(&mut rng, 3, 10);
        let mut s = build_submap(&mut rng, 0, &[0, 1, 2], &poses, &pts, 0.0, &SimilarityTransform::identity());
        let t = s.tracks.get_mut(&PointId(0)).unwrap();
        t.observations.get_mut(&ImageId(0)).unwrap().pixel.x += 20.0;
        assert_eq!(s.remove_outlier_observations(4.0), 1);
        assert_eq!(s.tracks[&PointId(0)].len(), 2);
        s.check_invariants().unwrap();
    }
}
