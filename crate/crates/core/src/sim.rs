//! Synthetic multi-agent world generator, observation streamer, and metric
//! evaluator. Worlds are built at keyframe granularity: smooth seeded
//! walks, planted overlap corridors whose keyframes are shared exactly
//! between the two segments, and perceptual-aliasing decoys whose
//! descriptors match but whose geometry does not.

use crate::cluster::Partition;
use crate::descriptor::{
    polar_histogram_descriptor, synthetic_descriptor, Descriptor, SYNTHETIC_CELL,
};
use crate::geometry::{between, compose, PointCloud2, Pose2};
use crate::posegraph::{ate, NodeKey};
use crate::server::MergeState;
use crate::types::{Keyframe, Segment, SegmentId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error("infeasible overlap plan: {0}")]
    InfeasibleOverlapPlan(String),
}

/// A planted overlap: `seg_b` re-traverses `overlap_length` meters of
/// `seg_a`'s path, forward or reverse. `at_a`/`at_b` place the corridor
/// along each segment as fractions of its keyframe count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapSpec {
    pub seg_a: SegmentId,
    pub seg_b: SegmentId,
    pub overlap_length: f64,
    #[serde(default)]
    pub reverse: bool,
    #[serde(default = "default_at_a")]
    pub at_a: f64,
    #[serde(default = "default_at_b")]
    pub at_b: f64,
}

fn default_at_a() -> f64 {
    0.6
}
fn default_at_b() -> f64 {
    0.05
}

/// A perceptual-aliasing decoy: `n_keyframes` cells of `seg_a` share
/// descriptors with a compressed run on `seg_b`, so sequence matching
/// fires while edge lengths disagree by the compression factor. The first
/// `consistent_prefix` keyframes keep true spacing, which lets a decoy
/// pass geometric checks until enough of it has been observed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AliasSpec {
    pub seg_a: SegmentId,
    pub at_a: f64,
    pub seg_b: SegmentId,
    pub at_b: f64,
    pub n_keyframes: usize,
    #[serde(default = "default_compression")]
    pub compression: f64,
    #[serde(default)]
    pub consistent_prefix: usize,
}

fn default_compression() -> f64 {
    0.7
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorSource {
    Synthetic,
    PolarHistogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_segments: u32,
    pub segment_length: f64,
    pub keyframe_spacing: f64,
    pub overlaps: Vec<OverlapSpec>,
    pub odom_sigma_trans: f64,
    pub odom_sigma_rot: f64,
    pub descriptor_noise: f64,
    pub descriptor_len: usize,
    pub descriptor_source: DescriptorSource,
    pub alias_pairs: Vec<AliasSpec>,
    /// sub-map radius for the polar-histogram source
    pub submap_radius: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 1,
            n_segments: 12,
            segment_length: 1000.0,
            keyframe_spacing: 5.0,
            overlaps: default_overlap_plan(),
            odom_sigma_trans: 0.01,
            odom_sigma_rot: 0.0,
            descriptor_noise: 0.02,
            descriptor_len: 64,
            descriptor_source: DescriptorSource::Synthetic,
            alias_pairs: default_alias_plan(),
            submap_radius: 50.0,
        }
    }
}

/// Three groups of four segments chained by ~200 m corridors, two of them
/// reverse-direction, plus two cross-group aliasing decoys.
pub fn default_overlap_plan() -> Vec<OverlapSpec> {
    let mk = |a: u32, b: u32, len: f64, rev: bool| OverlapSpec {
        seg_a: a,
        seg_b: b,
        overlap_length: len,
        reverse: rev,
        at_a: 0.6,
        at_b: 0.05,
    };
    vec![
        mk(0, 1, 200.0, false),
        mk(1, 2, 150.0, false),
        mk(2, 3, 200.0, true),
        mk(4, 5, 200.0, false),
        mk(5, 6, 150.0, false),
        mk(6, 7, 200.0, true),
        mk(8, 9, 200.0, false),
        mk(9, 10, 150.0, false),
        mk(10, 11, 200.0, false),
    ]
}

pub fn default_alias_plan() -> Vec<AliasSpec> {
    vec![
        AliasSpec {
            seg_a: 0,
            at_a: 0.85,
            seg_b: 4,
            at_b: 0.45,
            n_keyframes: 10,
            compression: 0.7,
            consistent_prefix: 0,
        },
        AliasSpec {
            seg_a: 5,
            at_a: 0.85,
            seg_b: 8,
            at_b: 0.45,
            n_keyframes: 10,
            compression: 0.7,
            consistent_prefix: 0,
        },
    ]
}

/// One planted overlap with its exact keyframe index pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapTruth {
    pub seg_a: SegmentId,
    pub seg_b: SegmentId,
    pub pairs: Vec<(usize, usize)>,
    pub reverse: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub poses: Vec<(SegmentId, usize, Pose2)>,
    pub overlaps: Vec<OverlapTruth>,
    pub partition: Partition,
    pub alias_groups: Vec<Vec<(SegmentId, usize)>>,
}

impl GroundTruth {
    pub fn pose_map(&self) -> BTreeMap<NodeKey, Pose2> {
        self.poses.iter().map(|&(s, k, p)| ((s, k), p)).collect()
    }

    pub fn overlap_pair_set(&self) -> BTreeSet<(SegmentId, SegmentId)> {
        self.overlaps
            .iter()
            .map(|o| {
                if o.seg_a <= o.seg_b {
                    (o.seg_a, o.seg_b)
                } else {
                    (o.seg_b, o.seg_a)
                }
            })
            .collect()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0f64);
    let u2: f64 = rng.gen_range(0.0..1.0f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A smooth heading-walk of `n` positions starting at `start` with the
/// given heading. `bias` is a constant per-step curvature that makes the
/// walk arc steadily away from whatever it branched off; the noise term is
/// clamped to keep the turning radius gentle.
fn heading_walk(
    start: (f64, f64),
    heading: f64,
    n: usize,
    spacing: f64,
    bias: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    let (mut x, mut y, mut h) = (start.0, start.1, heading);
    for _ in 0..n {
        out.push((x, y));
        let dh = bias + (0.02 * gauss(rng)).clamp(-0.04, 0.04);
        h += dh;
        x += spacing * h.cos();
        y += spacing * h.sin();
    }
    out
}

/// Internal per-keyframe construction record.
#[derive(Clone)]
struct GtSample {
    pos: (f64, f64),
    alias: Option<u64>,
}

fn yaws_from_positions(samples: &[GtSample]) -> Vec<f64> {
    let n = samples.len();
    let mut yaws = vec![0.0; n];
    for k in 0..n {
        let (a, b) = if k + 1 < n {
            (samples[k].pos, samples[k + 1].pos)
        } else {
            (samples[k - 1].pos, samples[k].pos)
        };
        yaws[k] = (b.1 - a.1).atan2(b.0 - a.0);
    }
    yaws
}

struct SegmentPlan {
    copier_of: Option<OverlapSpec>,
    source_spans: Vec<(usize, usize)>, // reserved (start, len) spans as corridor source
    alias_host: Vec<AliasSpec>,        // this segment is seg_b (compressed side)
    alias_source: Vec<AliasSpec>,      // this segment is seg_a
}

/// Deterministically generate segments and ground truth for a world spec.
pub fn generate_world(spec: &WorldSpec) -> Result<(Vec<Segment>, GroundTruth), SimError> {
    validate_spec(spec)?;
    let n_kf = (spec.segment_length / spec.keyframe_spacing).round() as usize;
    let corridor_len =
        |o: &OverlapSpec| (o.overlap_length / spec.keyframe_spacing).round() as usize;

    // per-segment construction plans
    let mut plans: BTreeMap<SegmentId, SegmentPlan> = (0..spec.n_segments)
        .map(|s| {
            (
                s,
                SegmentPlan {
                    copier_of: None,
                    source_spans: Vec::new(),
                    alias_host: Vec::new(),
                    alias_source: Vec::new(),
                },
            )
        })
        .collect();
    for o in &spec.overlaps {
        let m = corridor_len(o);
        let start_a = ((o.at_a * (n_kf - m) as f64).round() as usize).min(n_kf - m);
        plans.get_mut(&o.seg_a).unwrap().source_spans.push((start_a, m));
        let plan_b = plans.get_mut(&o.seg_b).unwrap();
        if plan_b.copier_of.is_some() {
            return Err(SimError::InfeasibleOverlapPlan(format!(
                "segment {} re-traverses more than one corridor",
                o.seg_b
            )));
        }
        plan_b.copier_of = Some(o.clone());
    }
    for a in &spec.alias_pairs {
        plans.get_mut(&a.seg_a).unwrap().alias_source.push(a.clone());
        plans.get_mut(&a.seg_b).unwrap().alias_host.push(a.clone());
    }

    // true partition: connected components of the overlap graph
    let partition = overlap_components(spec);

    // group centers keep unrelated segments far apart
    let group_of: BTreeMap<SegmentId, usize> = partition
        .clusters
        .iter()
        .enumerate()
        .flat_map(|(g, c)| c.iter().map(move |&s| (s, g)))
        .collect();

    // generation order: corridor sources before their copiers
    let order = topological_order(spec)?;

    let mut attempts: BTreeMap<SegmentId, u64> = (0..spec.n_segments).map(|s| (s, 0)).collect();
    for round in 0..200 {
        let mut samples: BTreeMap<SegmentId, Vec<GtSample>> = BTreeMap::new();
        for &seg_id in &order {
            let plan = &plans[&seg_id];
            let attempt = attempts[&seg_id];
            let seed = splitmix(spec.seed ^ splitmix(seg_id as u64) ^ splitmix(0xf00d + attempt));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let group = group_of[&seg_id];
            let center = (group as f64 * 4000.0, (group % 2) as f64 * 2500.0);
            let s = build_segment_samples(
                spec, seg_id, plan, n_kf, center, &mut rng, &samples,
            );
            samples.insert(seg_id, s);
        }
        // clearance: unrelated segment pairs must stay apart
        match find_clearance_violation(spec, &samples) {
            None => {
                return Ok(assemble_world(spec, &plans, samples, partition));
            }
            Some((a, b)) => {
                // rerolling the anchored side alone often cannot move its
                // corridor, so shake the other side of the pair as well
                // every few rounds
                *attempts.get_mut(&b).unwrap() += 1;
                if round % 3 == 2 {
                    *attempts.get_mut(&a).unwrap() += 1;
                }
            }
        }
    }
    Err(SimError::InfeasibleOverlapPlan(
        "could not satisfy clearance constraints".into(),
    ))
}

fn validate_spec(spec: &WorldSpec) -> Result<(), SimError> {
    let n_kf = (spec.segment_length / spec.keyframe_spacing).round() as usize;
    if n_kf < 4 {
        return Err(SimError::InfeasibleOverlapPlan("segments too short".into()));
    }
    for o in &spec.overlaps {
        if o.seg_a >= spec.n_segments || o.seg_b >= spec.n_segments || o.seg_a == o.seg_b {
            return Err(SimError::InfeasibleOverlapPlan(format!(
                "bad overlap pair ({}, {})",
                o.seg_a, o.seg_b
            )));
        }
        if o.overlap_length < 2.0 * spec.keyframe_spacing {
            return Err(SimError::InfeasibleOverlapPlan(
                "overlap shorter than two keyframes".into(),
            ));
        }
        let m = (o.overlap_length / spec.keyframe_spacing).round() as usize;
        if m >= n_kf {
            return Err(SimError::InfeasibleOverlapPlan(
                "overlap longer than the segment".into(),
            ));
        }
    }
    for a in &spec.alias_pairs {
        if a.seg_a >= spec.n_segments || a.seg_b >= spec.n_segments || a.seg_a == a.seg_b {
            return Err(SimError::InfeasibleOverlapPlan("bad alias pair".into()));
        }
        if a.n_keyframes < 2 || a.n_keyframes >= n_kf {
            return Err(SimError::InfeasibleOverlapPlan("bad alias span".into()));
        }
    }
    Ok(())
}

fn overlap_components(spec: &WorldSpec) -> Partition {
    let n = spec.n_segments as usize;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for o in &spec.overlaps {
        let (a, b) = (
            find(&mut parent, o.seg_a as usize),
            find(&mut parent, o.seg_b as usize),
        );
        if a != b {
            parent[a] = b;
        }
    }
    let mut groups: BTreeMap<usize, Vec<SegmentId>> = BTreeMap::new();
    for s in 0..n {
        groups.entry(find(&mut parent, s)).or_default().push(s as u32);
    }
    Partition::new(groups.into_values().collect())
}

fn topological_order(spec: &WorldSpec) -> Result<Vec<SegmentId>, SimError> {
    let mut source_of: BTreeMap<SegmentId, SegmentId> = BTreeMap::new();
    for o in &spec.overlaps {
        source_of.insert(o.seg_b, o.seg_a);
    }
    let mut order = Vec::new();
    let mut done: BTreeSet<SegmentId> = BTreeSet::new();
    let mut pending: Vec<SegmentId> = (0..spec.n_segments).collect();
    let mut guard = 0;
    while !pending.is_empty() {
        guard += 1;
        if guard > spec.n_segments as usize + 2 {
            return Err(SimError::InfeasibleOverlapPlan(
                "cyclic corridor dependencies".into(),
            ));
        }
        pending.retain(|&s| {
            let ready = source_of.get(&s).map_or(true, |src| done.contains(src));
            if ready {
                order.push(s);
                done.insert(s);
            }
            !ready
        });
    }
    Ok(order)
}

fn build_segment_samples(
    spec: &WorldSpec,
    seg_id: SegmentId,
    plan: &SegmentPlan,
    n_kf: usize,
    center: (f64, f64),
    rng: &mut ChaCha8Rng,
    built: &BTreeMap<SegmentId, Vec<GtSample>>,
) -> Vec<GtSample> {
    let spacing = spec.keyframe_spacing;
    let mut samples: Vec<GtSample> = Vec::with_capacity(n_kf);
    let bias = if rng.gen_bool(0.5) { 0.009 } else { -0.009 };

    if let Some(o) = &plan.copier_of {
        // corridor copied from the source, approach walked backwards from
        // its first pose, departure walked forward from its last
        let m = (o.overlap_length / spacing).round() as usize;
        let src = &built[&o.seg_a];
        let start_a = ((o.at_a * (n_kf - m) as f64).round() as usize).min(n_kf - m);
        let mut corridor: Vec<GtSample> = src[start_a..start_a + m].to_vec();
        for s in &mut corridor {
            s.alias = None; // aliasing never applies inside a corridor
        }
        if o.reverse {
            corridor.reverse();
        }
        let n_before = ((o.at_b * (n_kf - m) as f64).round() as usize).min(n_kf - m);
        let n_after = n_kf - m - n_before;

        let entry_dir = {
            let (p0, p1) = (corridor[0].pos, corridor[1.min(m - 1)].pos);
            (p1.1 - p0.1).atan2(p1.0 - p0.0)
        };
        let mut approach: Vec<GtSample> = heading_walk(
            (
                corridor[0].pos.0 - spacing * entry_dir.cos(),
                corridor[0].pos.1 - spacing * entry_dir.sin(),
            ),
            entry_dir + PI,
            n_before,
            spacing,
            bias,
            rng,
        )
        .into_iter()
        .map(|pos| GtSample { pos, alias: None })
        .collect();
        approach.reverse();

        let exit_dir = {
            let (p0, p1) = (corridor[m - 2.min(m - 1)].pos, corridor[m - 1].pos);
            (p1.1 - p0.1).atan2(p1.0 - p0.0)
        };
        let departure: Vec<GtSample> = heading_walk(
            (
                corridor[m - 1].pos.0 + spacing * exit_dir.cos(),
                corridor[m - 1].pos.1 + spacing * exit_dir.sin(),
            ),
            exit_dir,
            n_after,
            spacing,
            bias,
            rng,
        )
        .into_iter()
        .map(|pos| GtSample { pos, alias: None })
        .collect();

        samples.extend(approach);
        samples.extend(corridor);
        samples.extend(departure);
    } else {
        let jitter = (
            center.0 + rng.gen_range(-400.0..400.0),
            center.1 + rng.gen_range(-400.0..400.0),
        );
        let heading = rng.gen_range(-PI..PI);
        samples.extend(
            heading_walk(jitter, heading, n_kf, spacing, bias, rng)
                .into_iter()
                .map(|pos| GtSample { pos, alias: None }),
        );
    }

    // compress alias-host spans: replace the span with a tighter-spaced run
    // along the local direction so edge lengths disagree with the source
    // beyond the consistent prefix
    for a in &plan.alias_host {
        let span = a.n_keyframes;
        let start = ((a.at_b * (n_kf - span) as f64).round() as usize).min(n_kf - span);
        let base = samples[start].pos;
        let dir = {
            let nxt = samples[(start + 1).min(n_kf - 1)].pos;
            (nxt.1 - base.1).atan2(nxt.0 - base.0)
        };
        let prefix = a.consistent_prefix.min(span);
        for m in 0..span {
            let d = if m < prefix {
                spacing * m as f64
            } else {
                spacing * prefix as f64 + a.compression * spacing * (m - prefix) as f64
            };
            samples[start + m].pos = (base.0 + d * dir.cos(), base.1 + d * dir.sin());
        }
    }

    // alias group tags on both sides
    let group_base = |a: &AliasSpec| {
        splitmix(0xa11a5 ^ splitmix((a.seg_a as u64) << 32 | a.seg_b as u64))
    };
    for a in &plan.alias_source {
        let span = a.n_keyframes;
        let start = ((a.at_a * (n_kf - span) as f64).round() as usize).min(n_kf - span);
        for m in 0..span {
            samples[start + m].alias = Some(group_base(a).wrapping_add(m as u64));
        }
    }
    for a in &plan.alias_host {
        let span = a.n_keyframes;
        let start = ((a.at_b * (n_kf - span) as f64).round() as usize).min(n_kf - span);
        for m in 0..span {
            samples[start + m].alias = Some(group_base(a).wrapping_add(m as u64));
        }
    }
    let _ = seg_id;
    samples
}

/// Unplanned proximity between keyframes of unrelated segments.
fn find_clearance_violation(
    spec: &WorldSpec,
    samples: &BTreeMap<SegmentId, Vec<GtSample>>,
) -> Option<(SegmentId, SegmentId)> {
    const CLEARANCE: f64 = 15.0;
    let partners: BTreeSet<(SegmentId, SegmentId)> = spec
        .overlaps
        .iter()
        .map(|o| (o.seg_a.min(o.seg_b), o.seg_a.max(o.seg_b)))
        .collect();
    let ids: Vec<SegmentId> = samples.keys().copied().collect();
    for (x, &a) in ids.iter().enumerate() {
        for &b in ids.iter().skip(x + 1) {
            if partners.contains(&(a.min(b), a.max(b))) {
                continue;
            }
            for sa in &samples[&a] {
                for sb in &samples[&b] {
                    let dx = sa.pos.0 - sb.pos.0;
                    let dy = sa.pos.1 - sb.pos.1;
                    if dx * dx + dy * dy < CLEARANCE * CLEARANCE {
                        return Some((a, b));
                    }
                }
            }
        }
    }
    None
}

fn assemble_world(
    spec: &WorldSpec,
    plans: &BTreeMap<SegmentId, SegmentPlan>,
    samples: BTreeMap<SegmentId, Vec<GtSample>>,
    partition: Partition,
) -> (Vec<Segment>, GroundTruth) {
    let n_kf = (spec.segment_length / spec.keyframe_spacing).round() as usize;
    let mut segments = Vec::new();
    let mut gt_poses = Vec::new();
    let mut alias_members: BTreeMap<u64, Vec<(SegmentId, usize)>> = BTreeMap::new();

    for (&seg_id, segment_samples) in &samples {
        let yaws = yaws_from_positions(segment_samples);
        let gt_list: Vec<Pose2> = segment_samples
            .iter()
            .zip(&yaws)
            .map(|(s, &yaw)| Pose2::new(s.pos.0, s.pos.1, yaw))
            .collect();

        // odometry: noisy integration of true deltas, starting at identity
        let noise_seed = splitmix(spec.seed ^ splitmix(0x0d0c ^ seg_id as u64));
        let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut odom = vec![Pose2::identity()];
        for k in 1..gt_list.len() {
            let delta = between(&gt_list[k - 1], &gt_list[k]);
            let d = (delta.x * delta.x + delta.y * delta.y).sqrt().max(1e-9);
            let noisy = Pose2::new(
                delta.x + spec.odom_sigma_trans * d.sqrt() * gauss(&mut nrng),
                delta.y + spec.odom_sigma_trans * d.sqrt() * gauss(&mut nrng),
                delta.yaw + spec.odom_sigma_rot * d.sqrt() * gauss(&mut nrng),
            );
            odom.push(compose(&odom[k - 1], &noisy));
        }

        let mut seg = Segment::new(seg_id);
        for (k, (sample, gt)) in segment_samples.iter().zip(&gt_list).enumerate() {
            let (descriptor, cloud) = make_observation(spec, sample, gt);
            if let Some(group) = sample.alias {
                alias_members.entry(group).or_default().push((seg_id, k));
            }
            gt_poses.push((seg_id, k, *gt));
            seg.keyframes.push(Keyframe {
                seg: seg_id,
                index: k,
                odom: odom[k],
                descriptor,
                cloud,
                gt: Some(*gt),
            });
        }
        segments.push(seg);
    }

    // exact ground-truth matched pairs from the plans
    let mut overlaps = Vec::new();
    for o in &spec.overlaps {
        let m = (o.overlap_length / spec.keyframe_spacing).round() as usize;
        let start_a = ((o.at_a * (n_kf - m) as f64).round() as usize).min(n_kf - m);
        let start_b = ((o.at_b * (n_kf - m) as f64).round() as usize).min(n_kf - m);
        let pairs: Vec<(usize, usize)> = (0..m)
            .map(|i| {
                let k_a = start_a + i;
                let k_b = if o.reverse {
                    start_b + (m - 1 - i)
                } else {
                    start_b + i
                };
                (k_a, k_b)
            })
            .collect();
        overlaps.push(OverlapTruth {
            seg_a: o.seg_a,
            seg_b: o.seg_b,
            pairs,
            reverse: o.reverse,
        });
    }
    let _ = plans;

    let truth = GroundTruth {
        poses: gt_poses,
        overlaps,
        partition,
        alias_groups: alias_members.into_values().collect(),
    };
    (segments, truth)
}

fn make_observation(
    spec: &WorldSpec,
    sample: &GtSample,
    gt: &Pose2,
) -> (Descriptor, Option<PointCloud2>) {
    match spec.descriptor_source {
        DescriptorSource::Synthetic => {
            // the local cloud is the geometric observation: loop closures
            // are refined against it, independently of odometry
            let local = local_structure_cloud(spec.seed, sample.pos, gt.yaw, spec.submap_radius);
            (
                synthetic_descriptor(
                    spec.seed,
                    sample.pos,
                    gt.yaw,
                    spec.descriptor_noise,
                    sample.alias,
                    spec.descriptor_len,
                ),
                Some(local),
            )
        }
        DescriptorSource::PolarHistogram => {
            let local = local_structure_cloud(spec.seed, sample.pos, gt.yaw, spec.submap_radius);
            // histogram over the globally-aligned cloud, standing in for a
            // trained orientation-invariant descriptor
            let aligned = PointCloud2::new(
                local
                    .points
                    .iter()
                    .map(|&p| {
                        let (s, c) = gt.yaw.sin_cos();
                        (c * p.0 - s * p.1, s * p.0 + c * p.1)
                    })
                    .collect(),
            );
            let bins_angular = 16;
            let bins_radial = spec.descriptor_len / bins_angular;
            let desc = polar_histogram_descriptor(
                &aligned,
                bins_radial,
                bins_angular,
                spec.submap_radius,
            )
            .expect("structure cloud is never empty");
            (desc, Some(local))
        }
    }
}

/// Deterministic world texture: a sparse lattice of structure points keyed
/// by cell hash, observed in the keyframe's local frame.
fn local_structure_cloud(seed: u64, pos: (f64, f64), yaw: f64, radius: f64) -> PointCloud2 {
    let cell = SYNTHETIC_CELL;
    let r_cells = (radius / cell).ceil() as i64;
    let (cx, cy) = ((pos.0 / cell).round() as i64, (pos.1 / cell).round() as i64);
    let mut points = Vec::new();
    for gx in (cx - r_cells)..=(cx + r_cells) {
        for gy in (cy - r_cells)..=(cy + r_cells) {
            let h = splitmix(seed ^ splitmix(gx as u64).rotate_left(21) ^ splitmix(gy as u64));
            if h % 3 != 0 {
                continue;
            }
            for p in 0..2u64 {
                let hp = splitmix(h ^ p);
                let ox = ((hp & 0xffff) as f64 / 65535.0 - 0.5) * cell;
                let oy = (((hp >> 16) & 0xffff) as f64 / 65535.0 - 0.5) * cell;
                let wx = gx as f64 * cell + ox;
                let wy = gy as f64 * cell + oy;
                let dx = wx - pos.0;
                let dy = wy - pos.1;
                if dx * dx + dy * dy <= radius * radius {
                    let (s, c) = (-yaw).sin_cos();
                    points.push((c * dx - s * dy, s * dx + c * dy));
                }
            }
        }
    }
    PointCloud2::new(points)
}

/// Deterministic interleaving of keyframes across segments into batches.
/// Every keyframe appears exactly once, in order within its segment.
pub fn stream(world: &[Segment], order_seed: u64, batch: usize) -> Vec<Vec<Keyframe>> {
    assert!(batch >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    let mut cursors: Vec<(usize, usize)> = world.iter().map(|s| (0, s.len())).collect();
    let mut flat = Vec::new();
    let mut remaining: usize = cursors.iter().map(|&(_, n)| n).sum();
    while remaining > 0 {
        let alive: Vec<usize> = cursors
            .iter()
            .enumerate()
            .filter(|(_, &(c, n))| c < n)
            .map(|(i, _)| i)
            .collect();
        let pick = alive[rng.gen_range(0..alive.len())];
        let (c, _) = cursors[pick];
        flat.push(world[pick].keyframes[c].clone());
        cursors[pick].0 += 1;
        remaining -= 1;
    }
    flat.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Success radius for retrieval and closure correctness.
pub const SUCCESS_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// recall_at[k-1] = recall@k over ground-truth revisit queries
    pub recall_at: Vec<f64>,
    /// (confidence threshold, precision, recall) swept over closure confidences
    pub pr_curve: Vec<(f64, f64, f64)>,
    /// overall closure precision at threshold zero
    pub precision: f64,
    /// fraction of true overlap pairs with at least one accepted closure
    pub merging_accuracy: f64,
    /// accepted closures between non-overlapping segment pairs
    pub false_merges: usize,
    /// accepted closures whose endpoints are farther than the success radius
    pub false_closures: usize,
    pub ate_per_cluster: Vec<(usize, f64)>,
    pub max_ate: f64,
    pub partition_exact: bool,
    pub rand_index: f64,
}

/// Metric evaluation of a merge result against ground truth.
pub fn evaluate(state: &MergeState, gt: &GroundTruth, top_n: usize) -> MetricsReport {
    let gt_poses = gt.pose_map();
    let position = |key: &NodeKey| {
        let p = &gt_poses[key];
        (p.x, p.y)
    };

    // (a) recall@k over revisit queries: each ground-truth matched pair is
    // queried in both directions against the partner segment
    let top_n = top_n.max(1);
    let mut successes = vec![0usize; top_n];
    let mut n_queries = 0usize;
    for o in &gt.overlaps {
        for &(ka, kb) in &o.pairs {
            for (qseg, qk, rseg) in [(o.seg_a, ka, o.seg_b), (o.seg_b, kb, o.seg_a)] {
                let (Some(query_seg), Some(ref_seg)) =
                    (state.segments.get(&qseg), state.segments.get(&rseg))
                else {
                    continue;
                };
                if qk >= query_seg.len() {
                    continue;
                }
                let qd = &query_seg.keyframes[qk].descriptor;
                let qpos = position(&(qseg, qk));
                let mut dists: Vec<(f64, usize)> = ref_seg
                    .keyframes
                    .iter()
                    .map(|kf| {
                        (
                            crate::descriptor::cosine_distance(qd, &kf.descriptor)
                                .unwrap_or(f64::INFINITY),
                            kf.index,
                        )
                    })
                    .collect();
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                n_queries += 1;
                let mut hit_rank = None;
                for (rank, (_, idx)) in dists.iter().take(top_n).enumerate() {
                    let rpos = position(&(rseg, *idx));
                    let dx = rpos.0 - qpos.0;
                    let dy = rpos.1 - qpos.1;
                    if (dx * dx + dy * dy).sqrt() <= SUCCESS_RADIUS {
                        hit_rank = Some(rank);
                        break;
                    }
                }
                if let Some(r) = hit_rank {
                    for s in successes.iter_mut().skip(r) {
                        *s += 1;
                    }
                }
            }
        }
    }
    let recall_at: Vec<f64> = successes
        .iter()
        .map(|&s| {
            if n_queries == 0 {
                0.0
            } else {
                s as f64 / n_queries as f64
            }
        })
        .collect();

    // (b) PR over closure confidence
    let closures = state.all_closures();
    let truthy: Vec<bool> = closures
        .iter()
        .map(|c| {
            let pa = position(&(c.seg_i, c.candidate.k_i));
            let pb = position(&(c.seg_j, c.candidate.k_j));
            let dx = pa.0 - pb.0;
            let dy = pa.1 - pb.1;
            (dx * dx + dy * dy).sqrt() <= SUCCESS_RADIUS
        })
        .collect();
    let total_gt_pairs: usize = gt.overlaps.iter().map(|o| o.pairs.len()).sum();
    let mut thresholds: Vec<f64> = closures.iter().map(|c| c.confidence).collect();
    thresholds.push(0.0);
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pr_curve = Vec::new();
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut accepted = 0usize;
        for (c, &ok) in closures.iter().zip(&truthy) {
            if c.confidence >= t {
                accepted += 1;
                if ok {
                    tp += 1;
                }
            }
        }
        let precision = if accepted == 0 {
            1.0
        } else {
            tp as f64 / accepted as f64
        };
        let recall = if total_gt_pairs == 0 {
            0.0
        } else {
            (tp as f64 / total_gt_pairs as f64).min(1.0)
        };
        pr_curve.push((t, precision, recall));
    }
    let n_true = truthy.iter().filter(|&&b| b).count();
    let precision = if closures.is_empty() {
        1.0
    } else {
        n_true as f64 / closures.len() as f64
    };

    // (c) merging accuracy and false merges
    let overlap_pairs = gt.overlap_pair_set();
    let mut found_pairs: BTreeSet<(SegmentId, SegmentId)> = BTreeSet::new();
    let mut false_merges = 0usize;
    let mut false_closures = 0usize;
    for (c, &ok) in closures.iter().zip(&truthy) {
        let key = (c.seg_i.min(c.seg_j), c.seg_i.max(c.seg_j));
        if overlap_pairs.contains(&key) {
            if ok {
                found_pairs.insert(key);
            }
        } else {
            false_merges += 1;
        }
        if !ok {
            false_closures += 1;
        }
    }
    let merging_accuracy = if overlap_pairs.is_empty() {
        1.0
    } else {
        found_pairs.len() as f64 / overlap_pairs.len() as f64
    };

    // (d) ATE per optimized cluster
    let mut ate_per_cluster = Vec::new();
    let mut max_ate: f64 = 0.0;
    for (ci, cluster) in state.partition.clusters.iter().enumerate() {
        let est: BTreeMap<NodeKey, Pose2> = state
            .global_poses
            .iter()
            .filter(|((seg, _), _)| cluster.contains(seg))
            .map(|(k, p)| (*k, *p))
            .collect();
        if est.len() < 2 {
            continue;
        }
        let truth: BTreeMap<NodeKey, Pose2> = est
            .keys()
            .filter_map(|k| gt_poses.get(k).map(|p| (*k, *p)))
            .collect();
        if truth.len() != est.len() {
            continue;
        }
        if let Ok(e) = ate(&est, &truth) {
            ate_per_cluster.push((ci, e));
            max_ate = max_ate.max(e);
        }
    }

    // (e) partition correctness
    let partition_exact = state.partition == gt.partition;
    let rand_index = if state.partition.covers(
        &gt.partition.clusters.iter().flatten().copied().collect::<Vec<_>>(),
    ) {
        state.partition.rand_index(&gt.partition)
    } else {
        0.0
    };

    MetricsReport {
        recall_at,
        pr_curve,
        precision,
        merging_accuracy,
        false_merges,
        false_closures,
        ate_per_cluster,
        max_ate,
        partition_exact,
        rand_index,
    }
}
