//! Shared domain types: keyframes and segments.

use crate::descriptor::Descriptor;
use crate::geometry::{PointCloud2, Pose2};
use serde::{Deserialize, Serialize};

pub type SegmentId = u32;

/// One sub-map sample along a segment: odometry pose, place descriptor, and
/// optionally the local cloud and the simulator's ground-truth pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Keyframe {
    pub seg: SegmentId,
    pub index: usize,
    pub odom: Pose2,
    pub descriptor: Descriptor,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cloud: Option<PointCloud2>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt: Option<Pose2>,
}

/// An agent's ordered keyframe sequence with odometry-relative poses. The
/// odometry frame starts at the segment's first keyframe.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Segment {
    pub id: SegmentId,
    pub keyframes: Vec<Keyframe>,
}

impl Segment {
    pub fn new(id: SegmentId) -> Self {
        Segment {
            id,
            keyframes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn descriptors(&self) -> Vec<&Descriptor> {
        self.keyframes.iter().map(|k| &k.descriptor).collect()
    }

    pub fn odom_poses(&self) -> Vec<Pose2> {
        self.keyframes.iter().map(|k| k.odom).collect()
    }

    /// Planar position of keyframe `k` in the segment's odometry frame.
    pub fn position(&self, k: usize) -> (f64, f64) {
        let p = &self.keyframes[k].odom;
        (p.x, p.y)
    }
}
