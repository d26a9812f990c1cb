//! The incremental merge orchestrator: pairwise LCD scheduling over
//! streamed observations, connection-weight updates, re-clustering, and
//! per-cluster optimization. Offline merging is the single-batch special
//! case of the same loop.

use crate::cluster::{
    connection_weight, incremental_update, spectral_cluster, ClusterConfig, ConnectionGraph,
    OverlapMeta, Partition,
};
use crate::descriptor::cosine_distance;
use crate::geometry::Pose2;
use crate::lcd::{
    detect_loops_on_matrix, difference_matrix, DifferenceMatrix, LcdConfig, LcdError, LoopClosure,
};
use crate::posegraph::{
    between_edges, optimize, rough_align_cluster, NodeKey, OptimizeConfig, PoseGraphError,
};
use crate::types::{Keyframe, Segment, SegmentId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ServerError {
    #[error("out-of-order keyframe for segment {seg}: expected {expected}, got {got}")]
    OutOfOrderKeyframe {
        seg: SegmentId,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Lcd(#[from] LcdError),
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
}

/// Pairs whose coarse descriptor sample never comes below this distance are
/// skipped entirely; it keeps the all-pairs schedule affordable.
pub const PREFILTER_MIN_DISTANCE: f64 = 0.6;

/// Per-pair incremental bookkeeping: how much of the difference matrix is
/// built, and the pair's current closure set (a function of the pair's full
/// data, replaced on every re-run).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PairState {
    pub diff: Option<DifferenceMatrix>,
    pub closures: Vec<LoopClosure>,
    pub omega: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MergeState {
    pub segments: BTreeMap<SegmentId, Segment>,
    pub pairs: BTreeMap<(SegmentId, SegmentId), PairState>,
    pub graph: ConnectionGraph,
    pub partition: Partition,
    pub eigenvalues: Vec<f64>,
    pub global_poses: BTreeMap<NodeKey, Pose2>,
    pub queue: BTreeSet<(SegmentId, SegmentId)>,
    pub dirty_clusters: BTreeSet<Vec<SegmentId>>,
}

/// Checkpoint form of the state: everything needed to resume evaluation,
/// keyed by plain lists so it serializes to a single JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateCheckpoint {
    pub segments: Vec<(SegmentId, usize)>,
    pub closures: Vec<LoopClosure>,
    pub weights: Vec<(SegmentId, SegmentId, f64)>,
    pub partition: Partition,
    pub eigenvalues: Vec<f64>,
    pub global_poses: Vec<(SegmentId, usize, Pose2)>,
}

impl MergeState {
    pub fn new() -> Self {
        Self::default()
    }

    /// All accepted closures across pairs, in deterministic order.
    pub fn all_closures(&self) -> Vec<LoopClosure> {
        let mut out: Vec<LoopClosure> = self
            .pairs
            .values()
            .flat_map(|p| p.closures.iter().cloned())
            .collect();
        out.sort_by(|a, b| {
            (a.seg_i, a.seg_j, a.candidate.k_i, a.candidate.k_j).cmp(&(
                b.seg_i,
                b.seg_j,
                b.candidate.k_i,
                b.candidate.k_j,
            ))
        });
        out
    }

    pub fn checkpoint(&self) -> StateCheckpoint {
        StateCheckpoint {
            segments: self.segments.iter().map(|(&id, s)| (id, s.len())).collect(),
            closures: self.all_closures(),
            weights: self
                .graph
                .agents()
                .iter()
                .enumerate()
                .flat_map(|(x, &a)| {
                    self.graph.agents()[x + 1..]
                        .iter()
                        .map(move |&b| (a, b, self.graph.weight(a, b)))
                })
                .filter(|&(_, _, w)| w > 0.0)
                .collect(),
            partition: self.partition.clone(),
            eigenvalues: self.eigenvalues.clone(),
            global_poses: self
                .global_poses
                .iter()
                .map(|(&(s, k), &p)| (s, k, p))
                .collect(),
        }
    }

    /// Append a batch of keyframes. Indices must arrive in order per
    /// segment; every pair touching a grown segment is queued for LCD.
    pub fn ingest(&mut self, batch: &[Keyframe]) -> Result<(), ServerError> {
        let mut grown: BTreeSet<SegmentId> = BTreeSet::new();
        for kf in batch {
            let seg = self
                .segments
                .entry(kf.seg)
                .or_insert_with(|| Segment::new(kf.seg));
            if kf.index != seg.len() {
                return Err(ServerError::OutOfOrderKeyframe {
                    seg: kf.seg,
                    expected: seg.len(),
                    got: kf.index,
                });
            }
            seg.keyframes.push(kf.clone());
            grown.insert(kf.seg);
            self.graph.ensure_agent(kf.seg);
        }
        let ids: Vec<SegmentId> = self.segments.keys().copied().collect();
        for g in grown {
            for &other in &ids {
                if other != g {
                    self.queue.insert((g.min(other), g.max(other)));
                }
            }
        }
        Ok(())
    }

    fn prefilter_passes(&self, a: SegmentId, b: SegmentId) -> bool {
        let sa = &self.segments[&a];
        let sb = &self.segments[&b];
        let stride = (sa.len() / 40).clamp(1, 5);
        let mut min_d = f64::INFINITY;
        for kf in sa.keyframes.iter().step_by(stride) {
            for other in &sb.keyframes {
                if let Ok(d) = cosine_distance(&kf.descriptor, &other.descriptor) {
                    if d < min_d {
                        min_d = d;
                    }
                }
            }
            if min_d <= PREFILTER_MIN_DISTANCE {
                return true;
            }
        }
        min_d <= PREFILTER_MIN_DISTANCE
    }

    /// Extend the pair's cached difference matrix to cover the segments'
    /// current lengths; only the new row/column strips are computed.
    fn extend_diff(
        &self,
        a: SegmentId,
        b: SegmentId,
        old: Option<DifferenceMatrix>,
    ) -> Result<DifferenceMatrix, LcdError> {
        let sa = &self.segments[&a];
        let sb = &self.segments[&b];
        let (rows, cols) = (sa.len(), sb.len());
        let mut d = match old {
            Some(d) if d.rows <= rows && d.cols <= cols => d,
            _ => {
                return difference_matrix(&sa.descriptors(), &sb.descriptors(), a, b);
            }
        };
        if d.rows == rows && d.cols == cols {
            return Ok(d);
        }
        let mut grid = vec![0.0f64; rows * cols];
        for r in 0..d.rows {
            for c in 0..d.cols {
                grid[r * cols + c] = d.get(r, c);
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                if r < d.rows && c < d.cols {
                    continue;
                }
                grid[r * cols + c] = cosine_distance(
                    &sa.keyframes[r].descriptor,
                    &sb.keyframes[c].descriptor,
                )?;
            }
        }
        d.rows = rows;
        d.cols = cols;
        d.d = grid;
        Ok(d)
    }

    /// One merge cycle: run queued pairwise detections, fold accepted
    /// closures into connection weights, re-cluster, and re-optimize
    /// clusters whose membership changed. A no-op at quiescence.
    pub fn step(
        &mut self,
        lcd_cfg: &LcdConfig,
        cluster_cfg: &ClusterConfig,
        opt_cfg: &OptimizeConfig,
    ) -> Result<(), ServerError> {
        let ready: Vec<(SegmentId, SegmentId)> = self
            .queue
            .iter()
            .filter(|(a, b)| {
                self.segments[a].len() >= lcd_cfg.win && self.segments[b].len() >= lcd_cfg.win
            })
            .copied()
            .collect();
        for key in &ready {
            self.queue.remove(key);
        }

        // pairwise detection in parallel; results applied in sorted order
        let jobs: Vec<((SegmentId, SegmentId), Option<DifferenceMatrix>)> = ready
            .iter()
            .map(|&key| {
                let diff = self.pairs.get_mut(&key).and_then(|p| p.diff.take());
                (key, diff)
            })
            .collect();
        let state_ref = &*self;
        let results: Vec<Result<((SegmentId, SegmentId), DifferenceMatrix, Vec<LoopClosure>), ServerError>> =
            jobs.into_par_iter()
                .map(|((a, b), old_diff)| {
                    if !state_ref.prefilter_passes(a, b) {
                        let diff = match old_diff {
                            Some(d) => d,
                            None => DifferenceMatrix {
                                rows: 0,
                                cols: 0,
                                d: Vec::new(),
                                seg_i: a,
                                seg_j: b,
                            },
                        };
                        return Ok(((a, b), diff, Vec::new()));
                    }
                    let diff = state_ref.extend_diff(a, b, old_diff)?;
                    let closures = detect_loops_on_matrix(
                        &diff,
                        &state_ref.segments[&a],
                        &state_ref.segments[&b],
                        lcd_cfg,
                    )?;
                    Ok(((a, b), diff, closures))
                })
                .collect();

        let mut changed: Vec<(SegmentId, SegmentId, f64)> = Vec::new();
        for result in results {
            let ((a, b), diff, closures) = result?;
            let pair = self.pairs.entry((a, b)).or_default();
            pair.diff = if diff.rows > 0 { Some(diff) } else { None };
            pair.closures = closures;
            let (omega, meta) = pair_weight(
                &self.segments[&a],
                &self.segments[&b],
                &pair.closures,
                cluster_cfg.c_w,
            );
            pair.omega = omega;
            if omega > 0.0 {
                changed.push((a, b, omega));
                self.graph.overlap_meta.insert((a, b), meta);
            }
        }

        let update = incremental_update(&mut self.graph, &self.partition, &changed, cluster_cfg);
        if update.changed {
            for &d in &update.dirty {
                self.dirty_clusters
                    .insert(update.partition.clusters[d].clone());
            }
            self.partition = update.partition;
            self.eigenvalues = update.eigenvalues;
        }

        self.optimize_dirty(opt_cfg);
        Ok(())
    }

    /// Optimize every cluster currently marked dirty; failures keep the
    /// cluster dirty and do not abort the run.
    fn optimize_dirty(&mut self, opt_cfg: &OptimizeConfig) {
        let dirty: Vec<Vec<SegmentId>> = self
            .dirty_clusters
            .iter()
            .filter(|c| self.partition.clusters.contains(c))
            .cloned()
            .collect();
        self.dirty_clusters
            .retain(|c| self.partition.clusters.contains(c));
        let closures = self.all_closures();
        for cluster in dirty {
            match self.optimize_cluster(&cluster, &closures, opt_cfg) {
                Ok(poses) => {
                    self.global_poses.extend(poses);
                    self.dirty_clusters.remove(&cluster);
                }
                Err(_) => {
                    // stays dirty; retried on the next step
                }
            }
        }
    }

    fn optimize_cluster(
        &self,
        cluster: &[SegmentId],
        closures: &[LoopClosure],
        opt_cfg: &OptimizeConfig,
    ) -> Result<BTreeMap<NodeKey, Pose2>, ServerError> {
        let mut nodes = rough_align_cluster(cluster, &self.segments, closures)?;
        let edges = between_edges(cluster, &self.segments, closures);
        optimize(&mut nodes, &edges, opt_cfg)?;
        Ok(nodes)
    }

    /// Drive the pipeline to quiescence, then canonicalize: every pair
    /// weight is recomputed from its final closure set (allowing decreases),
    /// the partition is rebuilt, and every cluster is re-optimized, so the
    /// final state is a pure function of the ingested data.
    pub fn quiesce(
        &mut self,
        lcd_cfg: &LcdConfig,
        cluster_cfg: &ClusterConfig,
        opt_cfg: &OptimizeConfig,
    ) -> Result<(), ServerError> {
        let mut guard = 0;
        while !self.queue.is_empty() {
            self.step(lcd_cfg, cluster_cfg, opt_cfg)?;
            guard += 1;
            if guard > 1000 {
                break;
            }
        }
        // canonical weights from the final closure sets
        let keys: Vec<(SegmentId, SegmentId)> = self.pairs.keys().copied().collect();
        for (a, b) in keys {
            let pair = &self.pairs[&(a, b)];
            let (omega, meta) = pair_weight(
                &self.segments[&a],
                &self.segments[&b],
                &pair.closures,
                cluster_cfg.c_w,
            );
            self.pairs.get_mut(&(a, b)).unwrap().omega = omega;
            self.graph.set_weight(a, b, omega);
            if omega > 0.0 {
                self.graph.overlap_meta.insert((a, b), meta);
            } else {
                self.graph.overlap_meta.remove(&(a, b));
            }
        }
        let outcome = spectral_cluster(
            &self.graph,
            cluster_cfg.theta,
            cluster_cfg.k_max,
            cluster_cfg.kmeans_seed,
        );
        self.partition = outcome.partition;
        self.eigenvalues = outcome.eigenvalues;
        self.dirty_clusters = self.partition.clusters.iter().cloned().collect();
        self.global_poses.clear();
        self.optimize_dirty(opt_cfg);
        Ok(())
    }
}

/// Connection weight of one pair from its accepted closures: the feature
/// gap is the mean descriptor distance over matches, the overlap length is
/// the mean odometry arc length of the matched spans.
fn pair_weight(
    seg_a: &Segment,
    seg_b: &Segment,
    closures: &[LoopClosure],
    c_w: f64,
) -> (f64, OverlapMeta) {
    if closures.is_empty() {
        return (
            0.0,
            OverlapMeta {
                l_ij: 0.0,
                feature_gap: 0.0,
            },
        );
    }
    let mut gap = 0.0;
    let (mut min_a, mut max_a) = (usize::MAX, 0usize);
    let (mut min_b, mut max_b) = (usize::MAX, 0usize);
    for c in closures {
        gap += cosine_distance(
            &seg_a.keyframes[c.candidate.k_i].descriptor,
            &seg_b.keyframes[c.candidate.k_j].descriptor,
        )
        .unwrap_or(2.0);
        min_a = min_a.min(c.candidate.k_i);
        max_a = max_a.max(c.candidate.k_i);
        min_b = min_b.min(c.candidate.k_j);
        max_b = max_b.max(c.candidate.k_j);
    }
    gap /= closures.len() as f64;
    let l = 0.5 * (arc_length(seg_a, min_a, max_a) + arc_length(seg_b, min_b, max_b));
    (
        connection_weight(gap, l, c_w),
        OverlapMeta {
            l_ij: l,
            feature_gap: gap,
        },
    )
}

fn arc_length(seg: &Segment, from: usize, to: usize) -> f64 {
    let mut total = 0.0;
    for k in from..to {
        let p = seg.position(k);
        let q = seg.position(k + 1);
        total += ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
    }
    total
}

/// Offline merging: ingest everything, then run to quiescence.
pub fn run_offline(
    segments: Vec<Segment>,
    lcd_cfg: &LcdConfig,
    cluster_cfg: &ClusterConfig,
    opt_cfg: &OptimizeConfig,
) -> Result<MergeState, ServerError> {
    let mut state = MergeState::new();
    let mut batch = Vec::new();
    for seg in segments {
        batch.extend(seg.keyframes);
    }
    batch.sort_by_key(|k| (k.seg, k.index));
    state.ingest(&batch)?;
    state.step(lcd_cfg, cluster_cfg, opt_cfg)?;
    state.quiesce(lcd_cfg, cluster_cfg, opt_cfg)?;
    Ok(state)
}

/// Incremental merging over prepared observation batches, with the same
/// canonical quiescence finish as the offline mode.
pub fn run_incremental(
    batches: &[Vec<Keyframe>],
    lcd_cfg: &LcdConfig,
    cluster_cfg: &ClusterConfig,
    opt_cfg: &OptimizeConfig,
    mut on_batch: impl FnMut(usize, &MergeState),
) -> Result<MergeState, ServerError> {
    let mut state = MergeState::new();
    for (i, batch) in batches.iter().enumerate() {
        state.ingest(batch)?;
        state.step(lcd_cfg, cluster_cfg, opt_cfg)?;
        on_batch(i, &state);
    }
    state.quiesce(lcd_cfg, cluster_cfg, opt_cfg)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::synthetic_descriptor;
    use crate::geometry::Pose2;

    fn keyframe(seg: SegmentId, index: usize) -> Keyframe {
        Keyframe {
            seg,
            index,
            odom: Pose2::new(index as f64 * 5.0, 0.0, 0.0),
            descriptor: synthetic_descriptor(
                1,
                (seg as f64 * 10_000.0, index as f64 * 5.0),
                0.0,
                0.0,
                None,
                32,
            ),
            cloud: None,
            gt: None,
        }
    }

    #[test]
    fn ingest_empty_batch_is_noop() {
        let mut state = MergeState::new();
        state.ingest(&[]).unwrap();
        assert!(state.segments.is_empty());
        assert!(state.queue.is_empty());
    }

    #[test]
    fn ingest_registers_segment_without_pairs() {
        let mut state = MergeState::new();
        state.ingest(&[keyframe(0, 0), keyframe(0, 1)]).unwrap();
        assert_eq!(state.segments.len(), 1);
        assert!(state.queue.is_empty());
    }

    #[test]
    fn ingest_rejects_out_of_order() {
        let mut state = MergeState::new();
        let err = state.ingest(&[keyframe(0, 1)]).unwrap_err();
        assert!(matches!(err, ServerError::OutOfOrderKeyframe { .. }));
    }

    #[test]
    fn ingest_queues_pairs() {
        let mut state = MergeState::new();
        state
            .ingest(&[keyframe(0, 0), keyframe(1, 0), keyframe(2, 0)])
            .unwrap();
        assert_eq!(state.queue.len(), 3);
        state.ingest(&[keyframe(0, 1)]).unwrap();
        assert_eq!(state.queue.len(), 3);
    }

    #[test]
    fn step_idempotent_at_quiescence() {
        let mut state = MergeState::new();
        state.ingest(&[keyframe(0, 0)]).unwrap();
        let cfgs = (
            LcdConfig::default(),
            ClusterConfig::default(),
            OptimizeConfig::default(),
        );
        // first step registers the lone agent in the partition
        state.step(&cfgs.0, &cfgs.1, &cfgs.2).unwrap();
        assert_eq!(state.partition.clusters, vec![vec![0]]);
        let before = format!("{:?}", (&state.partition, &state.queue, &state.global_poses));
        state.step(&cfgs.0, &cfgs.1, &cfgs.2).unwrap();
        assert_eq!(
            format!("{:?}", (&state.partition, &state.queue, &state.global_poses)),
            before
        );
    }
}
