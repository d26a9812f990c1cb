//! Multi-agent map merging on synthetic planar worlds: viewpoint-tolerant
//! place descriptors, adaptive loop-closure detection (sequence matching,
//! zoning, edge-consistency RANSAC), spectral sub-grouping over a
//! connection-weight graph, and pose-graph refinement, driven by an
//! incremental merge server that is invariant to observation order.

pub mod cluster;
pub mod config;
pub mod dataset;
pub mod descriptor;
pub mod geometry;
mod kmeans;
pub mod lcd;
pub mod posegraph;
pub mod server;
pub mod sim;
pub mod types;

pub use config::RunConfig;
pub use types::{Keyframe, Segment, SegmentId};
