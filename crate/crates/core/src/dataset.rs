//! On-disk formats: JSONL keyframe streams, JSON truth/partition/metrics
//! documents, and CSV tables. All writers are deterministic byte-for-byte
//! given equal inputs.

use crate::cluster::Partition;
use crate::descriptor::Descriptor;
use crate::geometry::Pose2;
use crate::lcd::LoopClosure;
use crate::posegraph::NodeKey;
use crate::server::StateCheckpoint;
use crate::sim::{GroundTruth, MetricsReport};
use crate::types::{Keyframe, Segment, SegmentId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One `world.jsonl` line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub seg: SegmentId,
    pub k: usize,
    pub odom: [f64; 3],
    pub gt: [f64; 3],
    pub desc: Vec<f64>,
}

impl From<&Keyframe> for KeyframeRecord {
    fn from(kf: &Keyframe) -> Self {
        let gt = kf.gt.unwrap_or(Pose2::identity());
        KeyframeRecord {
            seg: kf.seg,
            k: kf.index,
            odom: [kf.odom.x, kf.odom.y, kf.odom.yaw],
            gt: [gt.x, gt.y, gt.yaw],
            desc: kf.descriptor.values.clone(),
        }
    }
}

impl KeyframeRecord {
    pub fn into_keyframe(self) -> Keyframe {
        Keyframe {
            seg: self.seg,
            index: self.k,
            odom: Pose2::new(self.odom[0], self.odom[1], self.odom[2]),
            descriptor: Descriptor::new(self.desc),
            cloud: None,
            gt: Some(Pose2::new(self.gt[0], self.gt[1], self.gt[2])),
        }
    }
}

/// Atomic write: the content lands under the final name only as a whole.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

pub fn save_world_jsonl(path: &Path, world: &[Segment]) -> Result<(), DatasetError> {
    let mut out = String::new();
    for seg in world {
        for kf in &seg.keyframes {
            let record = KeyframeRecord::from(kf);
            let line = serde_json::to_string(&record).expect("keyframe serializes");
            out.push_str(&line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_world_jsonl(path: &Path) -> Result<Vec<Segment>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut segments: BTreeMap<SegmentId, Segment> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: KeyframeRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
        let kf = record.into_keyframe();
        segments
            .entry(kf.seg)
            .or_insert_with(|| Segment::new(kf.seg))
            .keyframes
            .push(kf);
    }
    let mut out: Vec<Segment> = segments.into_values().collect();
    for seg in &mut out {
        seg.keyframes.sort_by_key(|k| k.index);
    }
    Ok(out)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn save_truth(path: &Path, truth: &GroundTruth) -> Result<(), DatasetError> {
    save_json(path, truth)
}

pub fn load_truth(path: &Path) -> Result<GroundTruth, DatasetError> {
    load_json(path)
}

/// `partition.json` document: clusters plus the model-selection evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionReport {
    pub clusters: Vec<Vec<SegmentId>>,
    pub eigenvalues: Vec<f64>,
    pub theta: f64,
    pub k: usize,
}

impl PartitionReport {
    pub fn new(partition: &Partition, eigenvalues: &[f64], theta: f64) -> Self {
        PartitionReport {
            clusters: partition.clusters.clone(),
            eigenvalues: eigenvalues.to_vec(),
            theta,
            k: partition.k(),
        }
    }
}

pub fn save_closures_csv(path: &Path, closures: &[LoopClosure]) -> Result<(), DatasetError> {
    let mut out = String::from("seg_i,k_i,seg_j,k_j,dx,dy,dyaw,confidence\n");
    for c in closures {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.seg_i,
            c.candidate.k_i,
            c.seg_j,
            c.candidate.k_j,
            c.relative_pose.x,
            c.relative_pose.y,
            c.relative_pose.yaw,
            c.confidence
        )
        .expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

pub fn save_poses_csv(
    path: &Path,
    poses: &BTreeMap<NodeKey, Pose2>,
) -> Result<(), DatasetError> {
    let mut out = String::from("segment,index,x,y,yaw\n");
    for (&(seg, index), p) in poses {
        writeln!(out, "{},{},{},{},{}", seg, index, p.x, p.y, p.yaw).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

pub fn save_timeline_csv(path: &Path, timeline: &[(usize, usize)]) -> Result<(), DatasetError> {
    let mut out = String::from("batch,clusters\n");
    for (batch, clusters) in timeline {
        writeln!(out, "{batch},{clusters}").expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

pub fn save_pr_curve_csv(path: &Path, report: &MetricsReport) -> Result<(), DatasetError> {
    let mut out = String::from("threshold,precision,recall\n");
    for (t, p, r) in &report.pr_curve {
        writeln!(out, "{t},{p},{r}").expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

pub fn save_state(path: &Path, checkpoint: &StateCheckpoint) -> Result<(), DatasetError> {
    save_json(path, checkpoint)
}

pub fn load_state(path: &Path) -> Result<StateCheckpoint, DatasetError> {
    load_json(path)
}
