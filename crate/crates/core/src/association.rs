//! Layered neighborhood of a newly registered image and the per-image
//! weights that scope the local bundle adjustment.
//!
//! Layer 1 holds the retrieval neighbors of the root; layer `i + 1` holds
//! the retrieval neighbors of layer `i` that were not already placed. Each
//! image keeps the parent edge with the smallest accumulated descriptor
//! distance. Weights fall off with depth as `(sum 1/s)^-(i-1)` along that
//! path, and the deepest layer is held fixed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ImageId;

/// Lower clamp on edge distances so duplicate descriptors stay finite.
pub const S_MIN: f64 = 1e-6;

pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_FANOUT: usize = 8;

/// Camera weight: a positive finite value or the symbolic constant-camera marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Weight {
    Finite(f64),
    Fixed,
}

impl Weight {
    pub fn is_fixed(&self) -> bool {
        matches!(self, Weight::Fixed)
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            Weight::Finite(w) => Some(*w),
            Weight::Fixed => None,
        }
    }

    /// The stronger of two weights (`Fixed` dominates).
    pub fn max(self, other: Weight) -> Weight {
        match (self, other) {
            (Weight::Finite(a), Weight::Finite(b)) => Weight::Finite(a.max(b)),
            _ => Weight::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeEntry {
    pub image_id: ImageId,
    pub layer: usize,
    pub parent: ImageId,
    /// Clamped distance of the parent edge.
    pub edge_distance: f64,
    /// Clamped edge distances from the root down to this entry.
    pub path: Vec<f64>,
    pub path_inverse_sum: f64,
}

impl TreeEntry {
    pub fn path_distance_sum(&self) -> f64 {
        self.path.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationTree {
    pub root: ImageId,
    /// `layers[i - 1]` holds layer `i`, sorted by image id.
    pub layers: Vec<Vec<TreeEntry>>,
    pub depth: usize,
    pub fanout: usize,
}

impl AssociationTree {
    pub fn entries(&self) -> impl Iterator<Item = &TreeEntry> {
        self.layers.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, image_id: ImageId) -> bool {
        image_id == self.root || self.entries().any(|e| e.image_id == image_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageWeight {
    pub image_id: ImageId,
    /// 0 for the root.
    pub layer: usize,
    pub weight: Weight,
}

/// Breadth-first expansion to `depth` layers with `fanout` neighbors per
/// expansion. `retrieve(image, k)` must return registered images only, with
/// their descriptor distances; the root and already placed images are
/// skipped.
pub fn build_tree<F>(root: ImageId, mut retrieve: F, depth: usize, fanout: usize) -> AssociationTree
where
    F: FnMut(ImageId, usize) -> Vec<(ImageId, f64)>,
{
    let mut placed: BTreeSet<ImageId> = BTreeSet::from([root]);
    let mut layers: Vec<Vec<TreeEntry>> = Vec::new();
    let root_entry = TreeEntry {
        image_id: root,
        layer: 0,
        parent: root,
        edge_distance: 0.0,
        path: Vec::new(),
        path_inverse_sum: 0.0,
    };
    let mut frontier = vec![root_entry];
    for layer in 1..=depth {
        let mut best: BTreeMap<ImageId, TreeEntry> = BTreeMap::new();
        for parent in &frontier {
            for (id, dist) in retrieve(parent.image_id, fanout).into_iter().take(fanout) {
                if placed.contains(&id) {
                    continue;
                }
                let s = dist.max(S_MIN);
                let mut path = parent.path.clone();
                path.push(s);
                let candidate = TreeEntry {
                    image_id: id,
                    layer,
                    parent: parent.image_id,
                    edge_distance: s,
                    path_inverse_sum: parent.path_inverse_sum + 1.0 / s,
                    path,
                };
                let better = match best.get(&id) {
                    None => true,
                    Some(cur) => {
                        let (a, b) = (candidate.path_distance_sum(), cur.path_distance_sum());
                        a < b || (a == b && candidate.parent < cur.parent)
                    }
                };
                if better {
                    best.insert(id, candidate);
                }
            }
        }
        if best.is_empty() {
            break;
        }
        placed.extend(best.keys().copied());
        let entries: Vec<TreeEntry> = best.into_values().collect();
        frontier = entries.clone();
        layers.push(entries);
    }
    AssociationTree { root, layers, depth, fanout }
}

/// Weight of an entry at `layer` (1-based) whose shortest path has the given
/// edge distances.
pub fn layer_weight(layer: usize, depth: usize, path_distances: &[f64]) -> Weight {
    if layer == 0 {
        return Weight::Finite(1.0);
    }
    if layer >= depth {
        return Weight::Fixed;
    }
    let inv_sum: f64 = path_distances.iter().map(|&s| 1.0 / s.max(S_MIN)).sum();
    Weight::Finite(inv_sum.powi(-(layer as i32 - 1)))
}

/// Weights for the root and every tree entry, root first.
pub fn compute_weights(tree: &AssociationTree) -> Vec<ImageWeight> {
    let mut out = vec![ImageWeight { image_id: tree.root, layer: 0, weight: Weight::Finite(1.0) }];
    for e in tree.entries() {
        let weight = if e.layer >= tree.depth {
            Weight::Fixed
        } else {
            Weight::Finite(e.path_inverse_sum.powi(-(e.layer as i32 - 1)))
        };
        out.push(ImageWeight { image_id: e.image_id, layer: e.layer, weight });
    }
    out
}
