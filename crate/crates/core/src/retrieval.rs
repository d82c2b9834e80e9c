//! Incrementally built HNSW graph over global image descriptors.
//!
//! Every image is inserted as it arrives and the index answers top-N
//! similarity queries against everything inserted so far. Distances are
//! Euclidean over L2-normalized descriptors, so they lie in `[0, 2]`.
//!
//! Construction follows the classic layered scheme: a node draws its top
//! layer from `floor(-ln(u) * m_L)`, greedy `ef = 1` descent locates an
//! entry point down to that layer, and from there each layer runs a full
//! candidate search and links the `Max` closest nodes in both directions.
//! Neighbor lists that overflow (`Max` above layer 0, `2 * Max` at layer 0)
//! keep only their closest entries; the dropped edge is removed on both
//! ends so adjacency stays symmetric.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, mix64};
use crate::ImageId;

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("descriptor dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is at capacity ({0} elements)")]
    Capacity(usize),
    #[error("image {0} is already indexed")]
    DuplicateImage(ImageId),
}

/// Unit-norm global descriptor of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    image_id: ImageId,
    values: Vec<f32>,
}

impl GlobalDescriptor {
    /// Normalizes `values` to unit L2 norm.
    pub fn new(image_id: ImageId, mut values: Vec<f32>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::InvalidArgument("empty descriptor".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::InvalidArgument("non-finite descriptor value".into()));
        }
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(RetrievalError::InvalidArgument("zero-norm descriptor".into()));
        }
        for v in values.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
        Ok(GlobalDescriptor { image_id, values })
    }

    pub fn image_id(&self) -> ImageId {
        self.image_id
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f32 {
        l2_sq(&self.values, &other.values).sqrt()
    }
}

#[inline]
pub(crate) fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    pub max_elements: usize,
    pub ef_construction: usize,
    /// Maximum connections per node per layer above 0 (doubled at layer 0).
    pub max_connections: usize,
    pub level_mult: f64,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            max_elements: 10_000,
            ef_construction: 200,
            max_connections: 16,
            level_mult: 1.0 / 16f64.ln(),
            ef_search: 64,
            seed: 0,
        }
    }
}

impl HnswParams {
    /// Sets `max_connections` and the matching default `level_mult = 1/ln(Max)`.
    pub fn with_max_connections(mut self, max_connections: usize) -> Self {
        self.max_connections = max_connections;
        self.level_mult = 1.0 / (max_connections as f64).ln();
        self
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.max_connections < 2 {
            return Err(RetrievalError::InvalidArgument("max_connections must be at least 2".into()));
        }
        if self.ef_construction < self.max_connections {
            return Err(RetrievalError::InvalidArgument("ef_construction must be >= max_connections".into()));
        }
        if self.ef_search == 0 || self.max_elements == 0 {
            return Err(RetrievalError::InvalidArgument("ef_search and max_elements must be positive".into()));
        }
        if !(self.level_mult.is_finite() && self.level_mult >= 0.0) {
            return Err(RetrievalError::InvalidArgument("level_mult must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.max_connections
        } else {
            self.max_connections
        }
    }
}

/// Top layer of a new node for a uniform draw in `(0, 1]`.
pub fn assign_layer(rng_draw: f64, params: &HnswParams) -> Result<usize, RetrievalError> {
    if !(rng_draw > 0.0 && rng_draw <= 1.0) {
        return Err(RetrievalError::InvalidArgument(format!("layer draw {rng_draw} outside (0, 1]")));
    }
    let level = -rng_draw.ln() * params.level_mult;
    // Absorb the last-ulp error when the product lands on an integer.
    Ok((level + 1e-12).floor().max(0.0) as usize)
}

/// Search candidate ordered by distance, then by image id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub dist_sq: f32,
    pub image_id: ImageId,
    pub node: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.image_id.cmp(&other.image_id))
            .then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-layer proximity graph. Nodes are numbered in insertion order.
#[derive(Debug, Clone)]
pub struct HnswIndex {
    pub(crate) params: HnswParams,
    pub(crate) dim: usize,
    pub(crate) vectors: Vec<f32>,
    pub(crate) ids: Vec<ImageId>,
    /// `links[node][layer]` holds neighbor node numbers.
    pub(crate) links: Vec<Vec<Vec<u32>>>,
    pub(crate) entry_point: Option<u32>,
    pub(crate) top_layer: usize,
    pub(crate) by_id: HashMap<ImageId, u32>,
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Result<Self, RetrievalError> {
        params.validate()?;
        if dim == 0 {
            return Err(RetrievalError::InvalidArgument("dimension must be positive".into()));
        }
        Ok(HnswIndex {
            params,
            dim,
            vectors: Vec::new(),
            ids: Vec::new(),
            links: Vec::new(),
            entry_point: None,
            top_layer: 0,
            by_id: HashMap::new(),
        })
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn top_layer(&self) -> usize {
        self.top_layer
    }

    pub fn entry_point(&self) -> Option<ImageId> {
        self.entry_point.map(|n| self.ids[n as usize])
    }

    pub fn contains(&self, image_id: ImageId) -> bool {
        self.by_id.contains_key(&image_id)
    }

    pub fn node_of(&self, image_id: ImageId) -> Option<u32> {
        self.by_id.get(&image_id).copied()
    }

    pub fn image_of(&self, node: u32) -> ImageId {
        self.ids[node as usize]
    }

    /// Number of layers the node is present in (its top layer + 1).
    pub fn node_layers(&self, node: u32) -> usize {
        self.links[node as usize].len()
    }

    pub fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        self.links[node as usize].get(layer).map_or(&[], |v| v.as_slice())
    }

    pub fn vector(&self, node: u32) -> &[f32] {
        let start = node as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    pub fn descriptor(&self, image_id: ImageId) -> Option<&[f32]> {
        self.node_of(image_id).map(|n| self.vector(n))
    }

    fn candidate(&self, q: &[f32], node: u32) -> Candidate {
        Candidate { dist_sq: l2_sq(q, self.vector(node)), image_id: self.ids[node as usize], node }
    }

    fn check_dim(&self, len: usize) -> Result<(), RetrievalError> {
        if len != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: len });
        }
        Ok(())
    }

    /// Greedy best-first search of one layer. Returns at most `ef` nodes in
    /// ascending distance order.
    pub fn search_layer(&self, q: &[f32], ep: &[u32], ef: usize, layer: usize) -> Result<Vec<Candidate>, RetrievalError> {
        if ep.is_empty() {
            return Err(RetrievalError::InvalidArgument("empty entry set".into()));
        }
        if ef == 0 {
            return Err(RetrievalError::InvalidArgument("ef must be positive".into()));
        }
        self.check_dim(q.len())?;
        if let Some(&bad) = ep.iter().find(|&&n| (n as usize) >= self.len() || self.node_layers(n) <= layer) {
            return Err(RetrievalError::InvalidArgument(format!("entry node {bad} is not present at layer {layer}")));
        }
        Ok(self.search_layer_unchecked(q, ep, ef, layer))
    }

    fn search_layer_unchecked(&self, q: &[f32], ep: &[u32], ef: usize, layer: usize) -> Vec<Candidate> {
        let mut visited = vec![0u64; self.len().div_ceil(64)];
        let mut mark = |n: u32| -> bool {
            let (w, b) = ((n / 64) as usize, n % 64);
            let fresh = visited[w] & (1 << b) == 0;
            visited[w] |= 1 << b;
            fresh
        };
        let mut candidates: BinaryHeap<Reverse<Candidate>> = BinaryHeap::new();
        let mut found: BinaryHeap<Candidate> = BinaryHeap::new();
        for &n in ep {
            if mark(n) {
                let c = self.candidate(q, n);
                candidates.push(Reverse(c));
                found.push(c);
            }
        }
        while found.len() > ef {
            found.pop();
        }
        while let Some(Reverse(c)) = candidates.pop() {
            let furthest = *found.peek().expect("found set is never empty");
            if c > furthest {
                break;
            }
            for &nb in self.neighbors(c.node, layer) {
                if !mark(nb) {
                    continue;
                }
                let cand = self.candidate(q, nb);
                let furthest = *found.peek().expect("found set is never empty");
                if cand < furthest || found.len() < ef {
                    candidates.push(Reverse(cand));
                    found.push(cand);
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        found.into_sorted_vec()
    }

    fn layer_draw(&self, node: usize) -> f64 {
        let bits = mix64(derive_seed(self.params.seed, &[node as u64]));
        ((bits >> 11) + 1) as f64 / (1u64 << 53) as f64
    }

    /// Inserts one descriptor; returns its node number.
    pub fn insert(&mut self, descriptor: &GlobalDescriptor) -> Result<u32, RetrievalError> {
        self.check_dim(descriptor.dim())?;
        if self.len() >= self.params.max_elements {
            return Err(RetrievalError::Capacity(self.params.max_elements));
        }
        if self.by_id.contains_key(&descriptor.image_id) {
            return Err(RetrievalError::DuplicateImage(descriptor.image_id));
        }
        let node = self.len() as u32;
        let level = assign_layer(self.layer_draw(node as usize), &self.params)?;
        let q = descriptor.values();
        self.vectors.extend_from_slice(q);
        self.ids.push(descriptor.image_id);
        self.links.push(vec![Vec::new(); level + 1]);
        self.by_id.insert(descriptor.image_id, node);

        let Some(entry) = self.entry_point else {
            self.entry_point = Some(node);
            self.top_layer = level;
            return Ok(node);
        };

        let mut ep = vec![entry];
        for layer in (level + 1..=self.top_layer).rev() {
            let w = self.search_layer_unchecked(q, &ep, 1, layer);
            ep = vec![w[0].node];
        }
        for layer in (0..=level.min(self.top_layer)).rev() {
            let w = self.search_layer_unchecked(q, &ep, self.params.ef_construction, layer);
            let selected: Vec<u32> = w.iter().take(self.params.max_connections).map(|c| c.node).collect();
            self.links[node as usize][layer] = selected.clone();
            for &n in &selected {
                self.links[n as usize][layer].push(node);
                self.prune(n, layer);
            }
            ep = w.iter().map(|c| c.node).collect();
        }
        if level > self.top_layer {
            self.entry_point = Some(node);
            self.top_layer = level;
        }
        Ok(node)
    }

    /// Trims an overflowing neighbor list to its closest entries and removes
    /// the reverse edge of every dropped neighbor.
    fn prune(&mut self, node: u32, layer: usize) {
        let max = self.params.max_degree(layer);
        if self.links[node as usize][layer].len() <= max {
            return;
        }
        let base = self.vector(node).to_vec();
        let mut scored: Vec<Candidate> =
            self.links[node as usize][layer].iter().map(|&n| self.candidate(&base, n)).collect();
        scored.sort();
        let dropped: Vec<u32> = scored[max..].iter().map(|c| c.node).collect();
        self.links[node as usize][layer] = scored[..max].iter().map(|c| c.node).collect();
        for d in dropped {
            self.links[d as usize][layer].retain(|&x| x != node);
        }
    }

    fn descend(&self, q: &[f32]) -> Option<u32> {
        let mut ep = self.entry_point?;
        for layer in (1..=self.top_layer).rev() {
            ep = self.search_layer_unchecked(q, &[ep], 1, layer)[0].node;
        }
        Some(ep)
    }

    /// Approximate top-`n` neighbors, ascending by distance (ties by image id).
    pub fn query_top_n(&self, q: &[f32], n: usize) -> Result<Vec<(ImageId, f32)>, RetrievalError> {
        if n == 0 {
            return Err(RetrievalError::InvalidArgument("n must be at least 1".into()));
        }
        self.check_dim(q.len())?;
        let Some(ep) = self.descend(q) else { return Ok(Vec::new()) };
        let ef = self.params.ef_search.max(n);
        let mut w = self.search_layer_unchecked(q, &[ep], ef, 0);
        w.truncate(n);
        Ok(w.into_iter().map(|c| (c.image_id, c.dist_sq.sqrt())).collect())
    }

    /// Exact top-`n` over everything in the index by linear scan.
    pub fn exhaustive_top_n(&self, q: &[f32], n: usize) -> Result<Vec<(ImageId, f32)>, RetrievalError> {
        self.check_dim(q.len())?;
        let mut all: Vec<Candidate> = (0..self.len() as u32).map(|i| self.candidate(q, i)).collect();
        all.sort();
        all.truncate(n);
        Ok(all.into_iter().map(|c| (c.image_id, c.dist_sq.sqrt())).collect())
    }

    /// Verifies degree bounds, symmetry and layer nesting. Returns a
    /// description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (node, layers) in self.links.iter().enumerate() {
            for (layer, nbrs) in layers.iter().enumerate() {
                if nbrs.len() > self.params.max_degree(layer) {
                    return Err(format!("node {node} layer {layer} has degree {}", nbrs.len()));
                }
                for &nb in nbrs {
                    if nb as usize == node {
                        return Err(format!("node {node} links to itself at layer {layer}"));
                    }
                    let back = self.links[nb as usize].get(layer);
                    if !back.is_some_and(|b| b.contains(&(node as u32))) {
                        return Err(format!("edge {node}->{nb} at layer {layer} is not mirrored"));
                    }
                }
            }
        }
        if let Some(ep) = self.entry_point {
            if self.node_layers(ep) != self.top_layer + 1 {
                return Err("entry point does not reside at the top layer".into());
            }
            if self.links.iter().any(|l| l.len() > self.top_layer + 1) {
                return Err("a node exceeds the top layer".into());
            }
        }
        Ok(())
    }
}

/// Exact top-`n` by linear scan over a descriptor collection.
pub fn exhaustive_query<'a, I>(all: I, q: &GlobalDescriptor, n: usize) -> Vec<(ImageId, f32)>
where
    I: IntoIterator<Item = &'a GlobalDescriptor>,
{
    let mut scored: Vec<(f32, ImageId)> = all
        .into_iter()
        .filter(|d| d.dim() == q.dim())
        .map(|d| (l2_sq(d.values(), q.values()), d.image_id()))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(n);
    scored.into_iter().map(|(d, id)| (id, d.sqrt())).collect()
}

/// Fraction of the exact top-`n` recovered by an approximate result.
pub fn recall(approx: &[(ImageId, f32)], exact: &[(ImageId, f32)]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let hits = exact.iter().filter(|(id, _)| approx.iter().any(|(a, _)| a == id)).count();
    hits as f64 / exact.len() as f64
}
