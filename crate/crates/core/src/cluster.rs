//! Connection-weight graph over agents and Ncut spectral clustering with
//! eigenvalue-threshold model selection, plus the incremental partition
//! update used by the merge server.

use crate::kmeans::kmeans;
use crate::types::SegmentId;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cluster {0} has zero volume")]
    ZeroVolume(usize),
    #[error("partition does not cover the agent set")]
    BadPartition,
}

/// The constant regularizer in the connection-weight denominator.
pub const CONNECTION_EPS: f64 = 1e-4;

/// Overlap confidence between two agents from their matched features and
/// overlap length: `exp(-(gap^2 + c_w) / (2 L^2 + 1e-4))`, in (0, 1].
pub fn connection_weight(feature_gap: f64, l_ij: f64, c_w: f64) -> f64 {
    (-(feature_gap * feature_gap + c_w) / (2.0 * l_ij * l_ij + CONNECTION_EPS)).exp()
}

/// Per-pair overlap bookkeeping behind a connection weight.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OverlapMeta {
    pub l_ij: f64,
    pub feature_gap: f64,
}

/// Symmetric weighted graph over agents with zero diagonal. Agents are kept
/// sorted by id so the materialized matrix is canonical regardless of
/// registration order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConnectionGraph {
    agents: Vec<SegmentId>,
    weights: BTreeMap<(SegmentId, SegmentId), f64>,
    pub overlap_meta: BTreeMap<(SegmentId, SegmentId), OverlapMeta>,
}

fn ordered(i: SegmentId, j: SegmentId) -> (SegmentId, SegmentId) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl ConnectionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn agents(&self) -> &[SegmentId] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Register an agent; returns true when it was new.
    pub fn ensure_agent(&mut self, id: SegmentId) -> bool {
        match self.agents.binary_search(&id) {
            Ok(_) => false,
            Err(pos) => {
                self.agents.insert(pos, id);
                true
            }
        }
    }

    pub fn weight(&self, i: SegmentId, j: SegmentId) -> f64 {
        if i == j {
            return 0.0;
        }
        *self.weights.get(&ordered(i, j)).unwrap_or(&0.0)
    }

    /// Monotone update: the new weight replaces the old only if larger.
    /// Returns true when the stored weight changed.
    pub fn raise_weight(&mut self, i: SegmentId, j: SegmentId, w: f64) -> bool {
        if i == j {
            return false;
        }
        self.ensure_agent(i);
        self.ensure_agent(j);
        let entry = self.weights.entry(ordered(i, j)).or_insert(0.0);
        if w > *entry {
            *entry = w;
            true
        } else {
            false
        }
    }

    /// Overwrite a weight unconditionally (canonicalization path). A weight
    /// of exactly 0 removes the edge.
    pub fn set_weight(&mut self, i: SegmentId, j: SegmentId, w: f64) -> bool {
        if i == j {
            return false;
        }
        self.ensure_agent(i);
        self.ensure_agent(j);
        let key = ordered(i, j);
        let old = self.weights.get(&key).copied().unwrap_or(0.0);
        if w == 0.0 {
            self.weights.remove(&key);
        } else {
            self.weights.insert(key, w);
        }
        old != w
    }

    /// Dense symmetric weight matrix in sorted-agent order.
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let n = self.agents.len();
        let mut w = DMatrix::zeros(n, n);
        for (&(i, j), &v) in &self.weights {
            let a = self.agents.binary_search(&i).expect("agent registered");
            let b = self.agents.binary_search(&j).expect("agent registered");
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
        w
    }

    /// Row sums of the weight matrix (the diagonal of the degree matrix).
    pub fn degrees(&self) -> Vec<f64> {
        let w = self.weight_matrix();
        (0..self.agents.len()).map(|r| w.row(r).sum()).collect()
    }
}

/// A disjoint cover of the agent set. Kept normalized: ids sorted within
/// clusters, clusters sorted by their smallest id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub clusters: Vec<Vec<SegmentId>>,
}

impl Partition {
    pub fn new(mut clusters: Vec<Vec<SegmentId>>) -> Self {
        for c in &mut clusters {
            c.sort_unstable();
        }
        clusters.retain(|c| !c.is_empty());
        clusters.sort_by_key(|c| c[0]);
        Partition { clusters }
    }

    pub fn singletons(agents: &[SegmentId]) -> Self {
        Partition::new(agents.iter().map(|&a| vec![a]).collect())
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_of(&self, id: SegmentId) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(&id))
    }

    pub fn covers(&self, agents: &[SegmentId]) -> bool {
        let mut all: Vec<SegmentId> = self.clusters.iter().flatten().copied().collect();
        all.sort_unstable();
        all == agents
    }

    /// Rand index against another partition over the same agent set.
    pub fn rand_index(&self, other: &Partition) -> f64 {
        let agents: Vec<SegmentId> = self.clusters.iter().flatten().copied().collect();
        let n = agents.len();
        if n < 2 {
            return 1.0;
        }
        let mut agree = 0usize;
        let mut total = 0usize;
        for a in 0..n {
            for b in a + 1..n {
                let same_self = self.cluster_of(agents[a]) == self.cluster_of(agents[b]);
                let same_other = other.cluster_of(agents[a]) == other.cluster_of(agents[b]);
                if same_self == same_other {
                    agree += 1;
                }
                total += 1;
            }
        }
        agree as f64 / total as f64
    }
}

/// Ncut objective: half the sum over clusters of cut(A)/vol(A). A cluster
/// with no cut edges contributes zero.
pub fn ncut_value(g: &ConnectionGraph, p: &Partition) -> Result<f64, ClusterError> {
    if !p.covers(g.agents()) {
        return Err(ClusterError::BadPartition);
    }
    let w = g.weight_matrix();
    let degrees = g.degrees();
    let index_of = |id: SegmentId| g.agents().binary_search(&id).unwrap();
    let mut total = 0.0;
    for (ci, cluster) in p.clusters.iter().enumerate() {
        let members: Vec<usize> = cluster.iter().map(|&id| index_of(id)).collect();
        let inside = vec![false; g.len()];
        let mut inside = inside;
        for &m in &members {
            inside[m] = true;
        }
        let mut cut = 0.0;
        for &m in &members {
            for o in 0..g.len() {
                if !inside[o] {
                    cut += w[(m, o)];
                }
            }
        }
        if cut == 0.0 {
            continue;
        }
        let vol: f64 = members.iter().map(|&m| degrees[m]).sum();
        if vol <= 0.0 {
            return Err(ClusterError::ZeroVolume(ci));
        }
        total += cut / vol;
    }
    Ok(0.5 * total)
}

/// Result of a spectral clustering run, carrying the eigenvalues used for
/// model selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralOutcome {
    pub partition: Partition,
    pub eigenvalues: Vec<f64>,
    pub k: usize,
}

/// Spectral clustering of the connection graph: unnormalized Laplacian
/// L = D - W, cluster count from the eigenvalues at or below `theta`
/// (capped by `k_max`), k-means over the first-k eigenvector rows.
/// Zero-degree agents become singleton clusters before decomposition.
pub fn spectral_cluster(
    g: &ConnectionGraph,
    theta: f64,
    k_max: usize,
    seed: u64,
) -> SpectralOutcome {
    let n = g.len();
    if n == 0 {
        return SpectralOutcome {
            partition: Partition::default(),
            eigenvalues: Vec::new(),
            k: 0,
        };
    }
    let degrees = g.degrees();
    let isolated: Vec<SegmentId> = g
        .agents()
        .iter()
        .zip(&degrees)
        .filter(|(_, &d)| d < 1e-12)
        .map(|(&a, _)| a)
        .collect();
    let connected: Vec<SegmentId> = g
        .agents()
        .iter()
        .zip(&degrees)
        .filter(|(_, &d)| d >= 1e-12)
        .map(|(&a, _)| a)
        .collect();

    let mut clusters: Vec<Vec<SegmentId>> = isolated.iter().map(|&a| vec![a]).collect();
    let mut eigenvalues: Vec<f64> = vec![0.0; isolated.len()];

    if !connected.is_empty() {
        let m = connected.len();
        let full = g.weight_matrix();
        let index_of =
            |id: SegmentId| g.agents().binary_search(&id).expect("agent registered");
        let mut w = DMatrix::zeros(m, m);
        for (a, &ia) in connected.iter().enumerate() {
            for (b, &ib) in connected.iter().enumerate() {
                w[(a, b)] = full[(index_of(ia), index_of(ib))];
            }
        }
        let mut lap = -w.clone();
        for r in 0..m {
            lap[(r, r)] = w.row(r).sum();
        }
        let eig = nalgebra::SymmetricEigen::new(lap);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let sorted_vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

        let below = sorted_vals.iter().filter(|&&v| v <= theta).count();
        let k = below.clamp(1, k_max.max(1).min(m));

        let rows: Vec<Vec<f64>> = (0..m)
            .map(|r| order[..k].iter().map(|&c| eig.eigenvectors[(r, c)]).collect())
            .collect();
        let km = kmeans(&rows, k, seed, 10);
        let mut groups: Vec<Vec<SegmentId>> = vec![Vec::new(); k];
        for (row, &label) in connected.iter().zip(&km.labels) {
            groups[label].push(*row);
        }
        clusters.extend(groups.into_iter().filter(|g| !g.is_empty()));
        eigenvalues.extend(sorted_vals);
    }

    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let partition = Partition::new(clusters);
    let k = partition.k();
    SpectralOutcome {
        partition,
        eigenvalues,
        k,
    }
}

/// Clustering parameters. `c_w` trades overlap length against descriptor
/// quality in the connection weight; at 5 m keyframe spacing a value around
/// 2e3 makes ~100 m overlaps strong and ~15 m scraps negligible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub theta: f64,
    pub c_w: f64,
    pub k_max: usize,
    pub kmeans_seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            theta: 0.1,
            c_w: 2000.0,
            k_max: 64,
            kmeans_seed: 0,
        }
    }
}

/// Outcome of an incremental update: the new partition and the indices of
/// clusters whose membership changed relative to the previous partition.
#[derive(Debug, Clone)]
pub struct ClusterUpdate {
    pub partition: Partition,
    pub eigenvalues: Vec<f64>,
    pub dirty: Vec<usize>,
    pub changed: bool,
}

/// Apply monotone weight updates and re-run spectral clustering when
/// anything effectively changed. Weight raises below the stored value are
/// dropped, keeping the final graph invariant to update order.
pub fn incremental_update(
    graph: &mut ConnectionGraph,
    prev: &Partition,
    changed_pairs: &[(SegmentId, SegmentId, f64)],
    cfg: &ClusterConfig,
) -> ClusterUpdate {
    let mut effective = false;
    for &(i, j, w) in changed_pairs {
        let new_i = graph.ensure_agent(i);
        let new_j = graph.ensure_agent(j);
        let raised = graph.raise_weight(i, j, w);
        effective |= new_i || new_j || raised;
    }
    if !prev.covers(graph.agents()) {
        effective = true;
    }
    if !effective {
        return ClusterUpdate {
            partition: prev.clone(),
            eigenvalues: Vec::new(),
            dirty: Vec::new(),
            changed: false,
        };
    }
    let outcome = spectral_cluster(graph, cfg.theta, cfg.k_max, cfg.kmeans_seed);
    let dirty: Vec<usize> = outcome
        .partition
        .clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| !prev.clusters.contains(c))
        .map(|(i, _)| i)
        .collect();
    ClusterUpdate {
        partition: outcome.partition,
        eigenvalues: outcome.eigenvalues,
        dirty,
        changed: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn connection_weight_zero_gap_is_one() {
        assert_relative_eq!(connection_weight(0.0, 10.0, 0.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(connection_weight(0.0, 0.0, 0.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn connection_weight_eps_dominated() {
        // L = 0 leaves only the 1e-4 regularizer in the denominator
        let w = connection_weight(1.0, 0.0, 0.0);
        assert!(w < 1e-300 || w == 0.0, "got {w}");
    }

    #[test]
    fn connection_weight_direct_evaluation() {
        let w = connection_weight(0.5, 10.0, 1.0);
        assert_relative_eq!(w, (-1.25f64 / 200.0001).exp(), epsilon = 1e-15);
    }

    fn block_graph(blocks: &[&[SegmentId]], intra: f64) -> ConnectionGraph {
        let mut g = ConnectionGraph::new();
        for block in blocks {
            for &a in *block {
                g.ensure_agent(a);
            }
            for (x, &a) in block.iter().enumerate() {
                for &b in block.iter().skip(x + 1) {
                    g.raise_weight(a, b, intra);
                }
            }
        }
        g
    }

    #[test]
    fn degrees_match_row_sum_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = ConnectionGraph::new();
        for a in 0..5u32 {
            g.ensure_agent(a);
        }
        for a in 0..5u32 {
            for b in a + 1..5 {
                if rng.gen_bool(0.7) {
                    g.raise_weight(a, b, rng.gen_range(0.01..1.0));
                }
            }
        }
        let w = g.weight_matrix();
        let d = g.degrees();
        for r in 0..5 {
            let mut sum = 0.0;
            for c in 0..5 {
                sum += w[(r, c)];
            }
            assert_relative_eq!(d[r], sum, epsilon = 1e-12);
        }
        // zero-weight graph has zero degrees
        let empty = block_graph(&[&[0], &[1]], 0.5);
        let _ = empty;
        let mut g2 = ConnectionGraph::new();
        g2.ensure_agent(0);
        g2.ensure_agent(1);
        assert_eq!(g2.degrees(), vec![0.0, 0.0]);
        // two agents, one edge
        let mut g3 = ConnectionGraph::new();
        g3.raise_weight(0, 1, 0.7);
        assert_eq!(g3.degrees(), vec![0.7, 0.7]);
    }

    #[test]
    fn weight_matrix_symmetric_zero_diagonal() {
        let mut g = ConnectionGraph::new();
        g.raise_weight(3, 1, 0.4);
        g.raise_weight(1, 2, 0.9);
        let w = g.weight_matrix();
        for r in 0..3 {
            assert_eq!(w[(r, r)], 0.0);
            for c in 0..3 {
                assert_eq!(w[(r, c)], w[(c, r)]);
            }
        }
        assert_eq!(g.weight(1, 3), 0.4);
        assert_eq!(g.weight(3, 1), 0.4);
    }

    #[test]
    fn ncut_disconnected_cliques_zero() {
        let g = block_graph(&[&[0, 1, 2], &[3, 4]], 0.8);
        let p = Partition::new(vec![vec![0, 1, 2], vec![3, 4]]);
        assert_relative_eq!(ncut_value(&g, &p).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn ncut_path_graph_hand_sum() {
        let mut g = ConnectionGraph::new();
        g.raise_weight(0, 1, 1.0);
        g.raise_weight(1, 2, 1.0);
        let p = Partition::new(vec![vec![0], vec![1, 2]]);
        assert_relative_eq!(ncut_value(&g, &p).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ncut_single_cluster_zero() {
        let g = block_graph(&[&[0, 1, 2]], 0.5);
        let p = Partition::new(vec![vec![0, 1, 2]]);
        assert_relative_eq!(ncut_value(&g, &p).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn spectral_planted_blocks() {
        let blocks: Vec<Vec<SegmentId>> =
            vec![vec![0, 1, 2], vec![3, 4, 5, 6], vec![7, 8], vec![9, 10, 11]];
        for k in 1..=4usize {
            let slice: Vec<&[SegmentId]> = blocks[..k].iter().map(|b| b.as_slice()).collect();
            let g = block_graph(&slice, 0.9);
            let out = spectral_cluster(&g, 0.1, 16, 7);
            let zero_count = out.eigenvalues.iter().filter(|&&v| v <= 1e-9).count();
            assert_eq!(zero_count, k, "zero eigenvalues for k={k}");
            let want = Partition::new(blocks[..k].to_vec());
            assert_eq!(out.partition, want, "partition for k={k}");
        }
    }

    #[test]
    fn spectral_single_agent() {
        let mut g = ConnectionGraph::new();
        g.ensure_agent(5);
        let out = spectral_cluster(&g, 0.1, 4, 0);
        assert_eq!(out.partition, Partition::new(vec![vec![5]]));
    }

    #[test]
    fn spectral_two_blocks_weak_bridge() {
        let mut g = block_graph(&[&[0, 1, 2], &[3, 4, 5]], 0.9);
        g.raise_weight(2, 3, 0.01);
        let out = spectral_cluster(&g, 0.1, 8, 7);
        assert_eq!(
            out.partition,
            Partition::new(vec![vec![0, 1, 2], vec![3, 4, 5]])
        );
        // model selection saw exactly two small eigenvalues
        assert!(out.eigenvalues[1] <= 0.1 && out.eigenvalues[2] > 0.1);
    }

    #[test]
    fn laplacian_eigenvalues_nonnegative_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.gen_range(2..10u32);
            let mut g = ConnectionGraph::new();
            for a in 0..n {
                g.ensure_agent(a);
            }
            for a in 0..n {
                for b in a + 1..n {
                    if rng.gen_bool(0.5) {
                        g.raise_weight(a, b, rng.gen_range(0.001..1.0));
                    }
                }
            }
            let out = spectral_cluster(&g, 0.1, n as usize, 0);
            for v in &out.eigenvalues {
                assert!(*v >= -1e-9, "negative eigenvalue {v}");
            }
            assert!(out.partition.covers(g.agents()));
        }
    }

    #[test]
    fn incremental_empty_change_is_noop() {
        let mut g = block_graph(&[&[0, 1], &[2, 3]], 0.8);
        let prev = spectral_cluster(&g, 0.1, 8, 0).partition;
        let up = incremental_update(&mut g, &prev, &[], &ClusterConfig::default());
        assert!(!up.changed);
        assert!(up.dirty.is_empty());
        assert_eq!(up.partition, prev);
    }

    #[test]
    fn incremental_join_two_blocks() {
        let mut g = block_graph(&[&[0, 1, 2], &[3, 4, 5]], 0.9);
        let cfg = ClusterConfig::default();
        let prev = spectral_cluster(&g, cfg.theta, cfg.k_max, cfg.kmeans_seed).partition;
        assert_eq!(prev.k(), 2);
        let up = incremental_update(&mut g, &prev, &[(2, 3, 0.9)], &cfg);
        assert!(up.changed);
        assert_eq!(up.partition.k(), 1);
        assert_eq!(up.partition.clusters[0], vec![0, 1, 2, 3, 4, 5]);
        assert!(!up.dirty.is_empty());
    }

    #[test]
    fn incremental_smaller_weight_ignored() {
        let mut g = block_graph(&[&[0, 1]], 0.9);
        let cfg = ClusterConfig::default();
        let prev = spectral_cluster(&g, cfg.theta, cfg.k_max, cfg.kmeans_seed).partition;
        let up = incremental_update(&mut g, &prev, &[(0, 1, 0.5)], &cfg);
        assert!(!up.changed);
        assert_eq!(g.weight(0, 1), 0.9);
    }

    #[test]
    fn streaming_order_invariant_final_partition() {
        let updates: Vec<(SegmentId, SegmentId, f64)> = vec![
            (0, 1, 0.9),
            (1, 2, 0.8),
            (3, 4, 0.85),
            (4, 5, 0.9),
            (0, 1, 0.3), // weaker duplicate, must be ignored
            (2, 0, 0.7),
            (5, 3, 0.75),
        ];
        let cfg = ClusterConfig::default();
        let mut reference: Option<Partition> = None;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let mut order = updates.clone();
            order.shuffle(&mut rng);
            let mut g = ConnectionGraph::new();
            let mut part = Partition::default();
            for u in order {
                let up = incremental_update(&mut g, &part, &[u], &cfg);
                part = up.partition;
            }
            match &reference {
                None => reference = Some(part),
                Some(r) => assert_eq!(&part, r),
            }
        }
        assert_eq!(reference.unwrap().k(), 2);
    }

    #[test]
    fn returned_partition_single_move_optimal() {
        // planted two- and three-block graphs with weak noise edges:
        // no single-agent move may improve the Ncut objective.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let blocks: Vec<Vec<SegmentId>> = if trial % 2 == 0 {
                vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]
            } else {
                vec![vec![0, 1], vec![2, 3, 4], vec![5, 6, 7]]
            };
            let slices: Vec<&[SegmentId]> = blocks.iter().map(|b| b.as_slice()).collect();
            let mut g = block_graph(&slices, 0.9);
            // weak cross edges
            for _ in 0..3 {
                let a = rng.gen_range(0..8u32);
                let b = rng.gen_range(0..8u32);
                if a != b {
                    g.raise_weight(a, b, rng.gen_range(0.001..0.02));
                }
            }
            let out = spectral_cluster(&g, 0.1, 8, 11);
            let base = match ncut_value(&g, &out.partition) {
                Ok(v) => v,
                Err(_) => continue,
            };
            // enumerate all single-agent moves
            for agent in 0..8u32 {
                let from = out.partition.cluster_of(agent).unwrap();
                let mut destinations: Vec<Option<usize>> =
                    (0..out.partition.k()).filter(|&c| c != from).map(Some).collect();
                destinations.push(None); // brand-new singleton
                for dest in destinations {
                    let mut clusters = out.partition.clusters.clone();
                    clusters[from].retain(|&a| a != agent);
                    match dest {
                        Some(d) => clusters[d].push(agent),
                        None => clusters.push(vec![agent]),
                    }
                    let perturbed = Partition::new(clusters);
                    if perturbed == out.partition {
                        continue;
                    }
                    if let Ok(v) = ncut_value(&g, &perturbed) {
                        assert!(
                            v >= base - 1e-9,
                            "single move improved ncut: {v} < {base} (trial {trial}, agent {agent})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn partition_rand_index() {
        let a = Partition::new(vec![vec![0, 1], vec![2, 3]]);
        let b = Partition::new(vec![vec![0, 1], vec![2, 3]]);
        assert_relative_eq!(a.rand_index(&b), 1.0, epsilon = 1e-12);
        let c = Partition::new(vec![vec![0, 1, 2, 3]]);
        assert!(a.rand_index(&c) < 1.0);
    }
}
