//! Base overlay construction: a ring lattice with random shortcuts.
//!
//! Every node starts from the same static graph; the protocol layer then
//! grows its own per-resource virtual topologies on top of it.

use std::collections::VecDeque;
use std::io::{self, Write};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::NodeId;

const CONNECTIVITY_RETRIES: u64 = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("node count must be at least 2, got {0}")]
    TooFewNodes(usize),
    #[error("k_near must be even and in 2..=n, got k_near={k_near} for n={n}")]
    BadNearDegree { n: usize, k_near: usize },
    #[error("graph not connected after {0} rebuild attempts")]
    ConnectivityRetriesExhausted(u64),
    #[error("operation requires a connected graph")]
    Disconnected,
    #[error("edge count {m} exceeds maximum for {n} nodes")]
    TooManyEdges { n: usize, m: usize },
}

/// Static undirected base overlay. Neighbour lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayGraph {
    n: usize,
    adjacency: Vec<Vec<NodeId>>,
    seed: u64,
}

impl OverlayGraph {
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn neighbours(&self, node: NodeId) -> &[NodeId] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.adjacency[node].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edge_count() as f64 / self.n as f64
    }

    pub fn is_connected(&self) -> bool {
        bfs_reach_count(&self.adjacency, 0) == self.n
    }

    /// Edge-list text form, one `i j` pair per line with `i < j`.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            for &j in nbrs {
                if i < j {
                    writeln!(out, "{i} {j}")?;
                }
            }
        }
        Ok(())
    }
}

/// Exact BFS graph statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphStats {
    /// Mean local clustering coefficient (nodes of degree < 2 count as 0).
    pub clustering: f64,
    /// Mean shortest-path length over unordered node pairs, in hops.
    pub avg_path: f64,
    /// Longest shortest path, in hops.
    pub diameter: usize,
}

/// Ring lattice plus `n_far` random shortcuts per node.
///
/// Nodes sit on a ring and link to the `k_near / 2` nearest on each side,
/// then each node draws `n_far` extra edges to uniformly random
/// non-adjacent targets. The result is rebuilt with a derived seed until
/// connected (the ring already guarantees this for k_near >= 2, so the
/// retry loop exists only to keep the contract explicit).
pub fn build_small_world(
    n: usize,
    k_near: usize,
    n_far: usize,
    seed: u64,
) -> Result<OverlayGraph, TopologyError> {
    if n < 2 {
        return Err(TopologyError::TooFewNodes(n));
    }
    if k_near % 2 != 0 || k_near < 2 || k_near > n {
        return Err(TopologyError::BadNearDegree { n, k_near });
    }

    for attempt in 0..CONNECTIVITY_RETRIES {
        let attempt_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let g = build_once(n, k_near, n_far, seed, attempt_seed);
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(TopologyError::ConnectivityRetriesExhausted(
        CONNECTIVITY_RETRIES,
    ))
}

fn build_once(n: usize, k_near: usize, n_far: usize, label_seed: u64, rng_seed: u64) -> OverlayGraph {
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let mut adj: Vec<Vec<NodeId>> = vec![Vec::with_capacity(k_near + 2 * n_far); n];

    let mut add_edge = |adj: &mut Vec<Vec<NodeId>>, a: usize, b: usize| {
        adj[a].push(b);
        adj[b].push(a);
    };

    // Ring lattice. Each ring distance generates one edge per pair except
    // the antipodal offset (2*off == n), which both endpoints would emit;
    // for n == 2 this leaves the single edge.
    for i in 0..n {
        for off in 1..=(k_near / 2) {
            let j = (i + off) % n;
            if 2 * off < n || i < j {
                add_edge(&mut adj, i, j);
            }
        }
    }

    // Random far shortcuts. Rejection-sample a non-adjacent target; give up
    // on a slot after a bounded number of tries (possible only on tiny or
    // nearly complete graphs).
    for i in 0..n {
        for _ in 0..n_far {
            let mut placed = false;
            for _ in 0..64 {
                let t = rng.gen_range(0..n);
                if t != i && !adj[i].contains(&t) {
                    add_edge(&mut adj, i, t);
                    placed = true;
                    break;
                }
            }
            if !placed {
                break;
            }
        }
    }

    for nbrs in &mut adj {
        nbrs.sort_unstable();
    }
    OverlayGraph {
        n,
        adjacency: adj,
        seed: label_seed,
    }
}

/// Uniform random graph with exactly `m` distinct edges. Used as the
/// clustering baseline when checking small-world structure.
pub fn build_uniform_random(n: usize, m: usize, seed: u64) -> Result<OverlayGraph, TopologyError> {
    if n < 2 {
        return Err(TopologyError::TooFewNodes(n));
    }
    let max_edges = n * (n - 1) / 2;
    if m > max_edges {
        return Err(TopologyError::TooManyEdges { n, m });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut adj: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    let mut edges = std::collections::HashSet::with_capacity(m);
    while edges.len() < m {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if edges.insert(key) {
            adj[key.0].push(key.1);
            adj[key.1].push(key.0);
        }
    }
    for nbrs in &mut adj {
        nbrs.sort_unstable();
    }
    Ok(OverlayGraph {
        n,
        adjacency: adj,
        seed,
    })
}

/// Mean local clustering coefficient. Defined for any graph.
pub fn clustering_coefficient(g: &OverlayGraph) -> f64 {
    let mut total = 0.0;
    for i in 0..g.n {
        let nbrs = &g.adjacency[i];
        let d = nbrs.len();
        if d < 2 {
            continue;
        }
        let mut links = 0usize;
        for (ai, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[ai + 1..] {
                if g.adjacency[a].binary_search(&b).is_ok() {
                    links += 1;
                }
            }
        }
        total += 2.0 * links as f64 / (d * (d - 1)) as f64;
    }
    total / g.n as f64
}

/// BFS-exact clustering, mean path length and diameter.
pub fn graph_stats(g: &OverlayGraph) -> Result<GraphStats, TopologyError> {
    let mut dist_sum: u64 = 0;
    let mut diameter = 0usize;
    let mut dist = vec![usize::MAX; g.n];
    let mut queue = VecDeque::new();

    for src in 0..g.n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        let mut seen = 1usize;
        while let Some(u) = queue.pop_front() {
            for &v in &g.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    seen += 1;
                    if v > src {
                        dist_sum += dist[v] as u64;
                    }
                    diameter = diameter.max(dist[v]);
                    queue.push_back(v);
                }
            }
        }
        if seen != g.n {
            return Err(TopologyError::Disconnected);
        }
    }

    let pairs = (g.n * (g.n - 1) / 2) as f64;
    Ok(GraphStats {
        clustering: clustering_coefficient(g),
        avg_path: dist_sum as f64 / pairs,
        diameter,
    })
}

fn bfs_reach_count(adj: &[Vec<NodeId>], start: NodeId) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::new();
    seen[start] = true;
    queue.push_back(start);
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_cycle_adjacency() {
        let g = build_small_world(4, 2, 0, 123).unwrap();
        assert_eq!(g.neighbours(0), &[1, 3]);
        assert_eq!(g.neighbours(1), &[0, 2]);
        assert_eq!(g.neighbours(2), &[1, 3]);
        assert_eq!(g.neighbours(3), &[0, 2]);
    }

    #[test]
    fn smallest_graph_is_single_edge() {
        let g = build_small_world(2, 2, 0, 9).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbours(0), &[1]);
        assert_eq!(g.neighbours(1), &[0]);
    }

    #[test]
    fn large_graph_connected_with_expected_degree() {
        let g = build_small_world(1600, 4, 1, 7).unwrap();
        assert_eq!(g.node_count(), 1600);
        assert!(g.is_connected());
        assert!(g.mean_degree() >= 6.0, "mean degree {}", g.mean_degree());
    }

    #[test]
    fn four_cycle_stats() {
        let g = build_small_world(4, 2, 0, 0).unwrap();
        let s = graph_stats(&g).unwrap();
        assert_eq!(s.clustering, 0.0);
        assert!((s.avg_path - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.diameter, 2);
    }

    #[test]
    fn complete_graph_stats() {
        // k_near = n wraps the lattice into K4.
        let g = build_small_world(4, 4, 0, 0).unwrap();
        assert_eq!(g.edge_count(), 6);
        let s = graph_stats(&g).unwrap();
        assert_eq!(s.clustering, 1.0);
        assert_eq!(s.avg_path, 1.0);
        assert_eq!(s.diameter, 1);
    }

    #[test]
    fn six_ring_diameter() {
        let g = build_small_world(6, 2, 0, 4).unwrap();
        let s = graph_stats(&g).unwrap();
        assert_eq!(s.diameter, 3);
    }

    #[test]
    fn deterministic_build() {
        let a = build_small_world(300, 4, 2, 42).unwrap();
        let b = build_small_world(300, 4, 2, 42).unwrap();
        assert_eq!(a, b);
        let c = build_small_world(300, 4, 2, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            build_small_world(1, 2, 0, 0),
            Err(TopologyError::TooFewNodes(1))
        ));
        assert!(matches!(
            build_small_world(10, 3, 0, 0),
            Err(TopologyError::BadNearDegree { .. })
        ));
        assert!(matches!(
            build_small_world(10, 0, 0, 0),
            Err(TopologyError::BadNearDegree { .. })
        ));
        assert!(matches!(
            build_small_world(4, 6, 0, 0),
            Err(TopologyError::BadNearDegree { .. })
        ));
    }

    #[test]
    fn undirected_no_self_loops_no_duplicates() {
        for seed in 0..10 {
            let g = build_small_world(120, 6, 2, seed).unwrap();
            for i in 0..g.node_count() {
                let nbrs = g.neighbours(i);
                for w in nbrs.windows(2) {
                    assert!(w[0] < w[1], "duplicate or unsorted neighbour at {i}");
                }
                for &j in nbrs {
                    assert_ne!(i, j, "self loop at {i}");
                    assert!(g.neighbours(j).contains(&i), "asymmetric edge {i}-{j}");
                }
            }
        }
    }

    #[test]
    fn edge_list_roundtrip_shape() {
        let g = build_small_world(5, 2, 0, 0).unwrap();
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), g.edge_count());
        assert!(lines.contains(&"0 1"));
        assert!(lines.contains(&"0 4"));
    }

    #[test]
    fn shortcuts_shorten_paths_on_average() {
        let mut sum0 = 0.0;
        let mut sum2 = 0.0;
        for seed in 0..20 {
            let g0 = build_small_world(200, 4, 0, seed).unwrap();
            let g2 = build_small_world(200, 4, 2, seed).unwrap();
            sum0 += graph_stats(&g0).unwrap().avg_path;
            sum2 += graph_stats(&g2).unwrap().avg_path;
        }
        assert!(
            sum2 < sum0,
            "expected shortcuts to reduce mean path: {sum0} -> {sum2}"
        );
    }

    #[test]
    fn clustering_beats_uniform_random_baseline() {
        let mut small_world = 0.0;
        let mut uniform = 0.0;
        for seed in 0..20 {
            let g = build_small_world(400, 4, 1, seed).unwrap();
            let r = build_uniform_random(400, g.edge_count(), seed).unwrap();
            small_world += clustering_coefficient(&g);
            uniform += clustering_coefficient(&r);
        }
        assert!(
            small_world > uniform,
            "small-world clustering {small_world} not above uniform baseline {uniform}"
        );
    }
}
