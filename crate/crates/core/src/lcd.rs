//! Adaptive loop-closure detection between segment pairs: difference
//! matrix, sequence matching, k-means zoning, RANSAC edge-consistency
//! filtering, and the combined detect_loops pipeline.

use crate::descriptor::{cosine_distance, Descriptor, DescriptorError};
use crate::geometry::{
    between, compose, estimate_rigid_transform_trimmed, icp_refine, Pose2,
};
use crate::kmeans::kmeans;
use crate::types::{Segment, SegmentId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LcdError {
    #[error("empty descriptor sequence")]
    EmptySequence,
    #[error("window {win} exceeds matrix extent {extent}")]
    WindowTooLarge { win: usize, extent: usize },
    #[error("window must be odd and >= 3, got {0}")]
    BadWindow(usize),
    #[error("slope range invalid: {0}..{1}")]
    BadSlopeRange(f64, f64),
    #[error("detect_loops requires two distinct segments")]
    SameSegment,
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

/// Pairwise cosine-distance matrix between two descriptor sequences,
/// row-major, entries in [0, 2].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifferenceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub d: Vec<f64>,
    pub seg_i: SegmentId,
    pub seg_j: SegmentId,
}

impl DifferenceMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.d[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.d[r * self.cols + c] = v;
    }

    pub fn transposed(&self) -> DifferenceMatrix {
        let mut d = vec![0.0; self.d.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                d[c * self.rows + r] = self.get(r, c);
            }
        }
        DifferenceMatrix {
            rows: self.cols,
            cols: self.rows,
            d,
            seg_i: self.seg_j,
            seg_j: self.seg_i,
        }
    }
}

/// A potential keyframe correspondence found by sequence matching. Lower
/// scores are better; `zone` is filled by `cluster_zones`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub k_i: usize,
    pub k_j: usize,
    pub score: f64,
    pub zone: Option<usize>,
}

/// A validated inter-segment correspondence. `relative_pose` takes the
/// frame of the seg_i keyframe to the frame of the seg_j keyframe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopClosure {
    pub seg_i: SegmentId,
    pub seg_j: SegmentId,
    pub candidate: LoopCandidate,
    pub relative_pose: Pose2,
    pub confidence: f64,
}

pub fn difference_matrix(
    f_i: &[&Descriptor],
    f_j: &[&Descriptor],
    seg_i: SegmentId,
    seg_j: SegmentId,
) -> Result<DifferenceMatrix, LcdError> {
    if f_i.is_empty() || f_j.is_empty() {
        return Err(LcdError::EmptySequence);
    }
    let mut d = Vec::with_capacity(f_i.len() * f_j.len());
    for a in f_i {
        for b in f_j {
            d.push(cosine_distance(a, b)?);
        }
    }
    Ok(DifferenceMatrix {
        rows: f_i.len(),
        cols: f_j.len(),
        d,
        seg_i,
        seg_j,
    })
}

const NORM_EPS: f64 = 1e-6;

/// Local contrast normalization: each entry becomes its deviation from the
/// mean of a sliding window within its own column, in units of that
/// window's standard deviation. `window` is the half-width in rows.
pub fn local_contrast_normalize(d: &DifferenceMatrix, window: usize) -> DifferenceMatrix {
    let mut out = d.clone();
    for c in 0..d.cols {
        for r in 0..d.rows {
            let lo = r.saturating_sub(window);
            let hi = (r + window).min(d.rows - 1);
            let n = (hi - lo + 1) as f64;
            let mut mean = 0.0;
            for k in lo..=hi {
                mean += d.get(k, c);
            }
            mean /= n;
            let mut var = 0.0;
            for k in lo..=hi {
                let dv = d.get(k, c) - mean;
                var += dv * dv;
            }
            let sigma = (var / n).sqrt();
            out.set(r, c, (d.get(r, c) - mean) / sigma.max(NORM_EPS));
        }
    }
    out
}

fn slope_grid(v_min: f64, v_max: f64, v_steps: usize, allow_reverse: bool) -> Vec<f64> {
    let mut slopes = Vec::with_capacity(v_steps * 2);
    if v_steps == 1 {
        slopes.push(v_min);
    } else {
        for i in 0..v_steps {
            slopes.push(v_min + (v_max - v_min) * i as f64 / (v_steps - 1) as f64);
        }
    }
    if allow_reverse {
        let forward = slopes.clone();
        for v in forward {
            slopes.push(-v);
        }
    }
    slopes
}

/// Mean of the normalized matrix along a straight line of slope `v`
/// through (k_i, k_j), spanning `win` rows. None when the line leaves the
/// matrix.
fn line_score(
    norm: &DifferenceMatrix,
    k_i: usize,
    k_j: usize,
    v: f64,
    win: usize,
) -> Option<f64> {
    let h = (win / 2) as i64;
    let mut sum = 0.0;
    for t in -h..=h {
        let r = k_i as i64 + t;
        let c = k_j as i64 + (v * t as f64).round() as i64;
        if r < 0 || r >= norm.rows as i64 || c < 0 || c >= norm.cols as i64 {
            return None;
        }
        sum += norm.get(r as usize, c as usize);
    }
    Some(sum / win as f64)
}

/// Sequence matching over the difference matrix: straight-line search over
/// a slope grid, one best column per row, thresholded on the
/// contrast-normalized mean along the line. The line's center entry must
/// itself pass the threshold, which rejects ghost rows near corridor ends
/// whose lines only graze their neighbors' matches.
/// O(rows * cols * v_steps * win).
pub fn sequence_match(
    d: &DifferenceMatrix,
    win: usize,
    v_min: f64,
    v_max: f64,
    v_steps: usize,
    score_thresh: f64,
    allow_reverse: bool,
) -> Result<Vec<LoopCandidate>, LcdError> {
    if win < 3 || win % 2 == 0 {
        return Err(LcdError::BadWindow(win));
    }
    if !(v_min > 0.0 && v_min <= v_max) {
        return Err(LcdError::BadSlopeRange(v_min, v_max));
    }
    let extent = d.rows.min(d.cols);
    if win > extent {
        return Err(LcdError::WindowTooLarge { win, extent });
    }
    let norm = local_contrast_normalize(d, win);
    let slopes = slope_grid(v_min, v_max, v_steps, allow_reverse);

    let mut out = Vec::new();
    for k_i in 0..d.rows {
        let mut best: Option<(f64, usize)> = None;
        for k_j in 0..d.cols {
            for &v in &slopes {
                if let Some(score) = line_score(&norm, k_i, k_j, v, win) {
                    let better = match best {
                        None => true,
                        Some((bs, bj)) => score < bs || (score == bs && k_j < bj),
                    };
                    if better {
                        best = Some((score, k_j));
                    }
                }
            }
        }
        if let Some((score, k_j)) = best {
            if score < score_thresh && norm.get(k_i, k_j) < score_thresh {
                out.push(LoopCandidate {
                    k_i,
                    k_j,
                    score,
                    zone: None,
                });
            }
        }
    }
    Ok(out)
}

/// k-means zoning of candidates over their (k_i, k_j) coordinates,
/// normalized per axis. k is chosen by a greedy elbow rule: keep adding
/// clusters while inertia drops below `ELBOW_RATIO` of the previous level.
pub fn cluster_zones(cands: &[LoopCandidate], max_k: usize, seed: u64) -> Vec<LoopCandidate> {
    const ELBOW_RATIO: f64 = 0.15;
    assert!(!cands.is_empty(), "cluster_zones requires candidates");
    let (mut min_i, mut max_i) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_j, mut max_j) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in cands {
        min_i = min_i.min(c.k_i as f64);
        max_i = max_i.max(c.k_i as f64);
        min_j = min_j.min(c.k_j as f64);
        max_j = max_j.max(c.k_j as f64);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (si, sj) = (span(min_i, max_i), span(min_j, max_j));
    let points: Vec<Vec<f64>> = cands
        .iter()
        .map(|c| vec![(c.k_i as f64 - min_i) / si, (c.k_j as f64 - min_j) / sj])
        .collect();

    // zones smaller than ~3 candidates cannot survive the edge filter
    let k_cap = max_k.min((cands.len() / 3).max(1));
    let mut chosen = kmeans(&points, 1, seed, 10);
    let mut k = 1;
    while k < k_cap {
        let next = kmeans(&points, k + 1, seed, 10);
        if chosen.inertia <= 1e-12 || next.inertia > ELBOW_RATIO * chosen.inertia {
            break;
        }
        chosen = next;
        k += 1;
    }
    cands
        .iter()
        .zip(&chosen.labels)
        .map(|(c, &zone)| LoopCandidate {
            zone: Some(zone),
            ..c.clone()
        })
        .collect()
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1)).sqrt()
}

/// Edge-length consistency of a candidate pair: both trajectories must see
/// edges of comparable length, `|edge_i| >= beta |edge_j|` and vice versa.
fn pair_consistent(
    a: &LoopCandidate,
    b: &LoopCandidate,
    poses_i: &[Pose2],
    poses_j: &[Pose2],
    beta: f64,
) -> bool {
    let pos = |p: &Pose2| (p.x, p.y);
    let e_i = euclid(pos(&poses_i[a.k_i]), pos(&poses_i[b.k_i]));
    let e_j = euclid(pos(&poses_j[a.k_j]), pos(&poses_j[b.k_j]));
    e_i >= beta * e_j && e_j >= beta * e_i
}

/// RANSAC over a zone's candidates with the edge-length consistency check.
/// Returns the best mutually consistent subset when it reaches
/// `min_inliers`, otherwise an empty list. Deterministic for a fixed seed.
pub fn ransac_edge_filter(
    zone_cands: &[LoopCandidate],
    poses_i: &[Pose2],
    poses_j: &[Pose2],
    beta: f64,
    iterations: usize,
    sample_n: usize,
    min_inliers: usize,
    seed: u64,
) -> Vec<LoopCandidate> {
    let n = zone_cands.len();
    if n < min_inliers.max(2) {
        return Vec::new();
    }
    let consistent =
        |a: usize, b: usize| pair_consistent(&zone_cands[a], &zone_cands[b], poses_i, poses_j, beta);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sample_n.max(2).min(n);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..iterations.max(1) {
        let sample = rand::seq::index::sample(&mut rng, n, m).into_vec();
        let sample_ok = sample
            .iter()
            .enumerate()
            .all(|(si, &a)| sample.iter().skip(si + 1).all(|&b| consistent(a, b)));
        if !sample_ok {
            continue;
        }
        // grow the sample into a maximal mutually consistent set
        let mut clique: Vec<usize> = sample.clone();
        for c in 0..n {
            if clique.contains(&c) {
                continue;
            }
            if clique.iter().all(|&s| consistent(c, s)) {
                clique.push(c);
            }
        }
        if clique.len() > best.len() {
            best = clique;
        }
    }
    if best.len() < min_inliers {
        return Vec::new();
    }
    best.sort_unstable();
    best.iter().map(|&i| zone_cands[i].clone()).collect()
}

/// Configuration of the adaptive loop-closure detector. Seeds are injected
/// from the run configuration so that detection is reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LcdConfig {
    pub win: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub v_steps: usize,
    pub score_thresh: f64,
    pub allow_reverse: bool,
    pub max_zones: usize,
    pub beta: f64,
    pub ransac_iterations: usize,
    pub ransac_sample_n: usize,
    pub min_inliers: usize,
    pub min_confidence: f64,
    pub icp_max_iter: usize,
    pub icp_tol: f64,
    pub kmeans_seed: u64,
    pub ransac_seed: u64,
}

impl Default for LcdConfig {
    fn default() -> Self {
        LcdConfig {
            win: 7,
            v_min: 0.8,
            v_max: 1.2,
            v_steps: 5,
            score_thresh: -2.5,
            allow_reverse: true,
            max_zones: 5,
            beta: 0.9,
            ransac_iterations: 200,
            ransac_sample_n: 4,
            min_inliers: 3,
            min_confidence: 0.5,
            icp_max_iter: 20,
            icp_tol: 1e-6,
            kmeans_seed: 0,
            ransac_seed: 0,
        }
    }
}

/// Full adaptive LCD pipeline for one segment pair: difference matrix,
/// sequence matching, zoning, per-zone RANSAC, then a per-zone rigid
/// transform (ICP-refined when clouds are present) turned into per-inlier
/// relative poses.
pub fn detect_loops(
    seg_i: &Segment,
    seg_j: &Segment,
    cfg: &LcdConfig,
) -> Result<Vec<LoopClosure>, LcdError> {
    if seg_i.id == seg_j.id {
        return Err(LcdError::SameSegment);
    }
    let d = difference_matrix(&seg_i.descriptors(), &seg_j.descriptors(), seg_i.id, seg_j.id)?;
    detect_loops_on_matrix(&d, seg_i, seg_j, cfg)
}

/// detect_loops starting from an already computed difference matrix; used
/// by the merge server, which maintains the matrix incrementally.
pub fn detect_loops_on_matrix(
    d: &DifferenceMatrix,
    seg_i: &Segment,
    seg_j: &Segment,
    cfg: &LcdConfig,
) -> Result<Vec<LoopClosure>, LcdError> {
    let cands = sequence_match(
        d,
        cfg.win,
        cfg.v_min,
        cfg.v_max,
        cfg.v_steps,
        cfg.score_thresh,
        cfg.allow_reverse,
    )?;
    if cands.is_empty() {
        return Ok(Vec::new());
    }
    let zoned = cluster_zones(&cands, cfg.max_zones, cfg.kmeans_seed);
    let poses_i = seg_i.odom_poses();
    let poses_j = seg_j.odom_poses();

    let n_zones = zoned.iter().filter_map(|c| c.zone).max().unwrap_or(0) + 1;
    let mut closures = Vec::new();
    for zone in 0..n_zones {
        let zone_cands: Vec<LoopCandidate> = zoned
            .iter()
            .filter(|c| c.zone == Some(zone))
            .cloned()
            .collect();
        if zone_cands.is_empty() {
            continue;
        }
        let inliers = ransac_edge_filter(
            &zone_cands,
            &poses_i,
            &poses_j,
            cfg.beta,
            cfg.ransac_iterations,
            cfg.ransac_sample_n,
            cfg.min_inliers,
            cfg.ransac_seed ^ zone as u64,
        );
        if inliers.is_empty() {
            continue;
        }
        let confidence = inliers.len() as f64 / zone_cands.len() as f64;
        if confidence < cfg.min_confidence {
            continue;
        }
        let frame_j_to_i = zone_transform(&inliers, seg_i, seg_j);
        for c in &inliers {
            let mut rel = between(
                &poses_i[c.k_i],
                &compose(&frame_j_to_i, &poses_j[c.k_j]),
            );
            if let (Some(ci), Some(cj)) = (
                &seg_i.keyframes[c.k_i].cloud,
                &seg_j.keyframes[c.k_j].cloud,
            ) {
                if let Ok(refined) = icp_refine(cj, ci, &rel, cfg.icp_max_iter, cfg.icp_tol) {
                    if refined.converged {
                        rel = refined.pose;
                    }
                }
            }
            closures.push(LoopClosure {
                seg_i: seg_i.id,
                seg_j: seg_j.id,
                candidate: c.clone(),
                relative_pose: rel,
                confidence,
            });
        }
    }
    closures.sort_by(|a, b| {
        (a.candidate.k_i, a.candidate.k_j).cmp(&(b.candidate.k_i, b.candidate.k_j))
    });
    Ok(closures)
}

/// Rigid transform taking seg_j's odometry frame into seg_i's, estimated
/// from the inlier correspondence positions. With a single inlier the
/// rotation is taken from the keyframe headings instead.
fn zone_transform(inliers: &[LoopCandidate], seg_i: &Segment, seg_j: &Segment) -> Pose2 {
    let src: Vec<(f64, f64)> = inliers.iter().map(|c| seg_j.position(c.k_j)).collect();
    let dst: Vec<(f64, f64)> = inliers.iter().map(|c| seg_i.position(c.k_i)).collect();
    match estimate_rigid_transform_trimmed(&src, &dst) {
        Ok(t) => t,
        Err(_) => {
            let c = &inliers[0];
            compose(
                &seg_i.keyframes[c.k_i].odom,
                &seg_j.keyframes[c.k_j].odom.inverse(),
            )
        }
    }
}
