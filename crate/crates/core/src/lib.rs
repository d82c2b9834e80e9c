//! Incremental, stream-driven structure-from-motion.
//!
//! Images from one or more agents are registered as they arrive. Overlap
//! candidates come from an incrementally built HNSW index over global
//! descriptors, new images are refined with a hierarchically weighted local
//! bundle adjustment, and independently grown submaps are fused once enough
//! shared images exist.
//!
//! Module map:
//! - [`retrieval`]: HNSW index and the exhaustive baseline.
//! - [`geometry`]: pinhole camera, two-view verification, PnP, triangulation, sim(3).
//! - [`association`]: association tree around a new image and its per-image weights.
//! - [`bundle`]: sparse LM bundle adjustment with Schur reduction.
//! - [`submap`]: submap registry, shared-image ledger and merging.
//! - [`engine`]: the per-frame processing loop.
//! - [`synthstream`]: synthetic scenes, packet streams and oracles.
//! - [`io`]: wire protocol, datasets, exports and metrics.

pub mod association;
pub mod bundle;
pub mod engine;
pub mod geometry;
pub mod io;
pub mod retrieval;
pub mod submap;
pub mod synthstream;

mod ids;
pub(crate) mod rng;

pub use ids::{AgentId, ImageId, PointId, SubmapId};
