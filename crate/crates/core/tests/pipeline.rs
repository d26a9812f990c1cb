//! End-to-end pipeline tests on generated worlds: detection on planted
//! corridors, offline merging, metric evaluation, and the offline /
//! incremental equivalence that the merge server guarantees.

use mapmerge::cluster::ClusterConfig;
use mapmerge::config::RunConfig;
use mapmerge::lcd::{detect_loops, LcdConfig};
use mapmerge::posegraph::OptimizeConfig;
use mapmerge::server::{run_incremental, run_offline};
use mapmerge::sim::{
    evaluate, generate_world, stream, AliasSpec, DescriptorSource, OverlapSpec, WorldSpec,
};

fn configs() -> (LcdConfig, ClusterConfig, OptimizeConfig) {
    let mut cfg = RunConfig::default();
    cfg.resolve_seeds();
    (cfg.lcd, cfg.cluster, cfg.opt)
}

fn two_segment_spec(seed: u64, reverse: bool, noise: f64) -> WorldSpec {
    WorldSpec {
        seed,
        n_segments: 2,
        segment_length: 600.0,
        keyframe_spacing: 5.0,
        overlaps: vec![OverlapSpec {
            seg_a: 0,
            seg_b: 1,
            overlap_length: 200.0,
            reverse,
            at_a: 0.6,
            at_b: 0.1,
        }],
        odom_sigma_trans: if noise > 0.0 { 0.01 } else { 0.0 },
        odom_sigma_rot: if noise > 0.0 { 0.001 } else { 0.0 },
        descriptor_noise: noise,
        descriptor_len: 64,
        descriptor_source: DescriptorSource::Synthetic,
        alias_pairs: vec![],
        submap_radius: 50.0,
    }
}

#[test]
fn detect_loops_finds_planted_corridor() {
    let (lcd_cfg, _, _) = configs();
    let (world, truth) = generate_world(&two_segment_spec(11, false, 0.0)).unwrap();
    let closures = detect_loops(&world[0], &world[1], &lcd_cfg).unwrap();
    assert!(!closures.is_empty(), "no closures on a planted corridor");

    // every closure pairs keyframes within the success radius
    let gt = truth.pose_map();
    for c in &closures {
        let pa = gt[&(0, c.candidate.k_i)];
        let pb = gt[&(1, c.candidate.k_j)];
        let d = ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt();
        assert!(d <= 10.0, "closure {d} m from truth");
    }
    // most of the 40 planted pairs are recovered
    assert!(
        closures.len() >= 30,
        "only {} closures recovered",
        closures.len()
    );
}

#[test]
fn detect_loops_reverse_corridor_needs_reverse_search() {
    let (mut lcd_cfg, _, _) = configs();
    let (world, _) = generate_world(&two_segment_spec(13, true, 0.0)).unwrap();
    lcd_cfg.allow_reverse = true;
    let with = detect_loops(&world[0], &world[1], &lcd_cfg).unwrap();
    assert!(!with.is_empty(), "reverse corridor missed with reverse search on");
    lcd_cfg.allow_reverse = false;
    let without = detect_loops(&world[0], &world[1], &lcd_cfg).unwrap();
    assert!(
        without.len() < with.len() / 2,
        "reverse search off should lose the corridor: {} vs {}",
        without.len(),
        with.len()
    );
}

#[test]
fn offline_merge_zero_noise_world_is_perfect() {
    let (lcd_cfg, cluster_cfg, opt_cfg) = configs();
    let mut spec = WorldSpec::default();
    spec.seed = 21;
    spec.odom_sigma_trans = 0.0;
    spec.odom_sigma_rot = 0.0;
    spec.descriptor_noise = 0.0;
    spec.alias_pairs.clear();
    let (world, truth) = generate_world(&spec).unwrap();
    let state = run_offline(world, &lcd_cfg, &cluster_cfg, &opt_cfg).unwrap();
    assert_eq!(state.partition, truth.partition, "partition mismatch");

    let report = evaluate(&state, &truth, 5);
    assert_eq!(report.recall_at[0], 1.0, "recall@1 {}", report.recall_at[0]);
    assert_eq!(report.merging_accuracy, 1.0);
    assert_eq!(report.false_merges, 0);
    assert_eq!(report.false_closures, 0);
    assert!(report.partition_exact);
    assert!(report.max_ate <= 1e-6, "ATE {}", report.max_ate);
}

#[test]
fn offline_merge_noisy_world_with_decoys_stays_precise() {
    let (lcd_cfg, cluster_cfg, opt_cfg) = configs();
    let mut spec = WorldSpec::default();
    spec.seed = 33;
    spec.odom_sigma_trans = 0.01;
    spec.descriptor_noise = 0.05;
    let (world, truth) = generate_world(&spec).unwrap();
    let state = run_offline(world, &lcd_cfg, &cluster_cfg, &opt_cfg).unwrap();
    let report = evaluate(&state, &truth, 5);
    assert_eq!(report.false_merges, 0, "false merges");
    assert_eq!(report.false_closures, 0, "false closures");
    assert!(report.merging_accuracy >= 0.9, "accuracy {}", report.merging_accuracy);
    assert!(report.max_ate <= 0.5, "ATE {}", report.max_ate);
    assert!(report.partition_exact, "partition {:?}", state.partition);
}

#[test]
fn offline_equals_incremental() {
    let (lcd_cfg, cluster_cfg, opt_cfg) = configs();
    let mut spec = WorldSpec::default();
    spec.seed = 8;
    let (world, _) = generate_world(&spec).unwrap();

    let offline = run_offline(world.clone(), &lcd_cfg, &cluster_cfg, &opt_cfg).unwrap();
    let batches = stream(&world, 77, 200);
    let incremental =
        run_incremental(&batches, &lcd_cfg, &cluster_cfg, &opt_cfg, |_, _| {}).unwrap();

    assert_eq!(offline.partition, incremental.partition);
    let ca = offline.checkpoint();
    let cb = incremental.checkpoint();
    assert_eq!(
        serde_json::to_string(&ca.closures).unwrap(),
        serde_json::to_string(&cb.closures).unwrap()
    );
    assert_eq!(
        serde_json::to_string(&ca.global_poses).unwrap(),
        serde_json::to_string(&cb.global_poses).unwrap()
    );
}

#[test]
fn streaming_order_does_not_change_the_result() {
    let (lcd_cfg, cluster_cfg, opt_cfg) = configs();
    let mut spec = WorldSpec::default();
    spec.seed = 5;
    let (world, _) = generate_world(&spec).unwrap();
    let mut reference: Option<(String, String)> = None;
    for order_seed in [1u64, 2, 3] {
        let batches = stream(&world, order_seed, 150);
        let state =
            run_incremental(&batches, &lcd_cfg, &cluster_cfg, &opt_cfg, |_, _| {}).unwrap();
        let key = (
            serde_json::to_string(&state.partition).unwrap(),
            serde_json::to_string(&state.checkpoint().closures).unwrap(),
        );
        match &reference {
            None => reference = Some(key),
            Some(r) => assert_eq!(&key, r, "order {order_seed} diverged"),
        }
    }
}

#[test]
fn staged_stream_recovers_from_early_wrong_merge() {
    // Two true groups {0,1} and {2,3}. A decoy corridor between 1 and 2 is
    // geometrically consistent over its first 12 keyframes, so while only
    // that stretch has streamed, detection accepts it with full confidence
    // and the two agents merge. Once the full decoy has streamed, the
    // zone's inlier ratio drops below the acceptance floor, the canonical
    // weights drop the edge, and the partition self-corrects.
    let (mut lcd_cfg, cluster_cfg, opt_cfg) = configs();
    lcd_cfg.min_confidence = 0.75;

    let spec = WorldSpec {
        seed: 91,
        n_segments: 4,
        segment_length: 600.0,
        keyframe_spacing: 5.0,
        overlaps: vec![
            OverlapSpec {
                seg_a: 0,
                seg_b: 1,
                overlap_length: 200.0,
                reverse: false,
                at_a: 0.6,
                at_b: 0.1,
            },
            OverlapSpec {
                seg_a: 2,
                seg_b: 3,
                overlap_length: 200.0,
                reverse: false,
                at_a: 0.6,
                at_b: 0.1,
            },
        ],
        odom_sigma_trans: 0.0,
        odom_sigma_rot: 0.0,
        descriptor_noise: 0.0,
        descriptor_len: 64,
        descriptor_source: DescriptorSource::Synthetic,
        alias_pairs: vec![AliasSpec {
            seg_a: 1,
            at_a: 0.8,
            seg_b: 2,
            at_b: 0.3,
            n_keyframes: 18,
            compression: 0.7,
            consistent_prefix: 12,
        }],
        submap_radius: 50.0,
    };
    let (world, truth) = generate_world(&spec).unwrap();
    assert_eq!(truth.partition.k(), 2);

    // locate the decoy spans to split the stream right after the
    // consistent prefix
    let n_kf = world[1].len();
    let span = 18usize;
    let start_a = ((0.8 * (n_kf - span) as f64).round() as usize).min(n_kf - span);
    let start_b = ((0.3 * (n_kf - span) as f64).round() as usize).min(n_kf - span);

    let mut early = Vec::new();
    for kf in &world[1].keyframes {
        if kf.index < start_a + 12 {
            early.push(kf.clone());
        }
    }
    for kf in &world[2].keyframes {
        if kf.index < start_b + 12 {
            early.push(kf.clone());
        }
    }
    early.sort_by_key(|k| (k.seg, k.index));

    let mut state = mapmerge::server::MergeState::new();
    state.ingest(&early).unwrap();
    state.step(&lcd_cfg, &cluster_cfg, &opt_cfg).unwrap();
    assert_eq!(
        state.partition.clusters,
        vec![vec![1, 2]],
        "expected the early decoy evidence to merge agents 1 and 2"
    );

    // stream everything else and finish
    let mut late = Vec::new();
    for seg in &world {
        for kf in &seg.keyframes {
            let already = match kf.seg {
                1 => kf.index < start_a + 12,
                2 => kf.index < start_b + 12,
                _ => false,
            };
            if !already {
                late.push(kf.clone());
            }
        }
    }
    late.sort_by_key(|k| (k.seg, k.index));
    state.ingest(&late).unwrap();
    state.step(&lcd_cfg, &cluster_cfg, &opt_cfg).unwrap();
    state.quiesce(&lcd_cfg, &cluster_cfg, &opt_cfg).unwrap();
    assert_eq!(
        state.partition, truth.partition,
        "partition failed to self-correct"
    );
}
