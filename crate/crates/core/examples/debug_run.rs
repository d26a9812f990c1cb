//! Scratch diagnostics for the offline pipeline (not part of the test
//! suite; run with `cargo run -p mapmerge --example debug_run --release`).

use mapmerge::config::RunConfig;
use mapmerge::posegraph::ate;
use mapmerge::server::run_offline;
use mapmerge::sim::{evaluate, generate_world, WorldSpec};
use std::collections::BTreeMap;

fn main() {
    let noisy = std::env::args().any(|a| a == "--noisy");
    let mut cfg = RunConfig::default();
    cfg.resolve_seeds();
    let mut spec = WorldSpec::default();
    if noisy {
        spec.seed = 33;
        spec.odom_sigma_trans = 0.01;
        spec.descriptor_noise = 0.05;
    } else {
        spec.seed = 21;
        spec.odom_sigma_trans = 0.0;
        spec.odom_sigma_rot = 0.0;
        spec.descriptor_noise = 0.0;
        spec.alias_pairs.clear();
    }

    let (world, truth) = generate_world(&spec).unwrap();
    let state = run_offline(world, &cfg.lcd, &cfg.cluster, &cfg.opt).unwrap();
    println!("partition: {:?}", state.partition);
    println!("truth:     {:?}", truth.partition);
    for ((a, b), pair) in &state.pairs {
        if !pair.closures.is_empty() {
            println!(
                "pair ({a},{b}): {} closures, omega {:.4}",
                pair.closures.len(),
                pair.omega
            );
        }
    }
    let gt = truth.pose_map();
    // closure pose-measurement quality: compare each loop edge against the
    // ground-truth relative pose
    let mut worst_edge = (0.0f64, (0u32, 0u32, 0usize, 0usize));
    for c in state.all_closures() {
        let ti = gt[&(c.seg_i, c.candidate.k_i)];
        let tj = gt[&(c.seg_j, c.candidate.k_j)];
        let want = mapmerge::geometry::between(&ti, &tj);
        let err = ((c.relative_pose.x - want.x).powi(2)
            + (c.relative_pose.y - want.y).powi(2))
        .sqrt();
        if err > worst_edge.0 {
            worst_edge = (err, (c.seg_i, c.seg_j, c.candidate.k_i, c.candidate.k_j));
        }
    }
    println!("worst loop-edge translation error {:.4} at {:?}", worst_edge.0, worst_edge.1);
    for (ci, cluster) in state.partition.clusters.iter().enumerate() {
        let est: BTreeMap<_, _> = state
            .global_poses
            .iter()
            .filter(|((s, _), _)| cluster.contains(s))
            .map(|(k, p)| (*k, *p))
            .collect();
        let tr: BTreeMap<_, _> = est.keys().map(|k| (*k, gt[k])).collect();
        if est.len() >= 2 {
            println!(
                "cluster {ci} {:?}: nodes {}, ate {:.6}",
                cluster,
                est.len(),
                ate(&est, &tr).unwrap()
            );
            // worst node
            let mut worst = (0.0f64, (0u32, 0usize));
            for (k, p) in &est {
                let t = &gt[k];
                let d = ((p.x - t.x).powi(2) + (p.y - t.y).powi(2)).sqrt();
                if d > worst.0 {
                    worst = (d, *k);
                }
            }
            println!("  worst unaligned node {:?} off by {:.4}", worst.1, worst.0);
        }
    }
    // direct re-optimization telemetry per cluster
    let closures = state.all_closures();
    let mut worst_yaw = 0.0f64;
    for c in &closures {
        let ti = gt[&(c.seg_i, c.candidate.k_i)];
        let tj = gt[&(c.seg_j, c.candidate.k_j)];
        let want = mapmerge::geometry::between(&ti, &tj);
        let dyaw = mapmerge::geometry::normalize_angle(c.relative_pose.yaw - want.yaw).abs();
        worst_yaw = worst_yaw.max(dyaw);
    }
    println!("worst loop-edge yaw error {:.5}", worst_yaw);
    for cluster in &state.partition.clusters {
        let mut nodes =
            mapmerge::posegraph::rough_align_cluster(cluster, &state.segments, &closures).unwrap();
        let tr: BTreeMap<_, _> = nodes.keys().map(|k| (*k, gt[k])).collect();
        let rough_ate = ate(&nodes, &tr).unwrap();
        let edges = mapmerge::posegraph::between_edges(cluster, &state.segments, &closures);
        // chi2 with the estimate pinned at ground truth
        let mut truth_nodes = tr.clone();
        let chi_truth = {
            let r = mapmerge::posegraph::optimize(
                &mut truth_nodes,
                &edges,
                &mapmerge::posegraph::OptimizeConfig {
                    max_iter: 0,
                    ..cfg.opt.clone()
                },
            )
            .unwrap();
            r.initial_chi2
        };
        let mut long_cfg = cfg.opt.clone();
        long_cfg.max_iter = 300;
        let report = mapmerge::posegraph::optimize(&mut nodes, &edges, &long_cfg).unwrap();
        let opt_ate = ate(&nodes, &tr).unwrap();
        println!(
            "cluster {:?}: rough ate {:.4} -> opt ate {:.4}; chi2 {:.3e} -> {:.3e} (truth {:.3e}) in {} iters (converged {})",
            cluster, rough_ate, opt_ate, report.initial_chi2, report.final_chi2, chi_truth,
            report.iterations, report.converged
        );
    }
    let report = evaluate(&state, &truth, 5);
    println!(
        "recall@1 {:.3}, acc {:.3}, false merges {}, false closures {}, max ate {:.6}, exact {}",
        report.recall_at[0],
        report.merging_accuracy,
        report.false_merges,
        report.false_closures,
        report.max_ate,
        report.partition_exact
    );
}
