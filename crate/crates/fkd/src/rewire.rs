//! Balanced Forman curvature and stochastic curvature-based rewiring.
//!
//! Curvature per edge combines degree terms, triangle support, and 4-cycle
//! support with the γ_max normalizer. Degrees here are self-loop augmented
//! (deg + 1), matching the normalized operators used everywhere else in this
//! toolkit; triangle and 4-cycle counts run on the simple graph. Rewiring
//! repeatedly adds one sampled support edge next to the most negatively
//! curved edge and optionally drops the most positively curved edge.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{FkdError, Result};
use crate::graph::Graph;
use crate::rng::substream;

/// Per-edge curvature values plus summary statistics.
#[derive(Debug, Clone)]
pub struct CurvatureReport {
    pub per_edge: Vec<((usize, usize), f64)>,
    pub min: f64,
    pub max: f64,
    pub fraction_negative: f64,
}

fn neighbor_sets(n: usize, edges: &[(usize, usize)]) -> Vec<HashSet<usize>> {
    let mut adj = vec![HashSet::new(); n];
    for &(i, j) in edges {
        adj[i].insert(j);
        adj[j].insert(i);
    }
    adj
}

fn curvature_from_sets(adj: &[HashSet<usize>], i: usize, j: usize) -> f64 {
    let di = adj[i].len() as f64 + 1.0;
    let dj = adj[j].len() as f64 + 1.0;
    let (dmax, dmin) = (di.max(dj), di.min(dj));

    let triangles = adj[i].intersection(&adj[j]).count() as f64;

    // Neighbors of i that close a 4-cycle over the edge (i, j) without a
    // diagonal, and symmetrically for j; γ is the largest number of such
    // 4-cycles through one common outer node.
    let mut sq_i = 0usize;
    let mut sq_j = 0usize;
    let mut gamma_max = 0usize;
    for &k in &adj[i] {
        if k == j || adj[j].contains(&k) {
            continue;
        }
        let mut cycles = 0usize;
        for &w in &adj[k] {
            if w != i && adj[j].contains(&w) && !adj[i].contains(&w) {
                cycles += 1;
            }
        }
        if cycles > 0 {
            sq_i += 1;
            gamma_max = gamma_max.max(cycles);
        }
    }
    for &k in &adj[j] {
        if k == i || adj[i].contains(&k) {
            continue;
        }
        let mut cycles = 0usize;
        for &w in &adj[k] {
            if w != j && adj[i].contains(&w) && !adj[j].contains(&w) {
                cycles += 1;
            }
        }
        if cycles > 0 {
            sq_j += 1;
            gamma_max = gamma_max.max(cycles);
        }
    }

    let mut ric = 2.0 / di + 2.0 / dj - 2.0 + 2.0 * triangles / dmax + triangles / dmin;
    if gamma_max > 0 {
        ric += (sq_i + sq_j) as f64 / (gamma_max as f64 * dmax);
    }
    ric
}

/// Balanced Forman curvature of an existing edge.
pub fn balanced_forman_curvature(g: &Graph, edge: (usize, usize)) -> Result<f64> {
    let (i, j) = edge;
    let e = (i.min(j), i.max(j));
    if !g.edges.contains(&e) {
        return Err(FkdError::NonEdge(i, j));
    }
    let adj = neighbor_sets(g.n, &g.edges);
    Ok(curvature_from_sets(&adj, i, j))
}

/// Curvature of every edge plus min/max/negative-fraction statistics.
pub fn curvature_report(g: &Graph) -> Result<CurvatureReport> {
    if g.edges.is_empty() {
        return Err(FkdError::EmptyEdgeSet);
    }
    let adj = neighbor_sets(g.n, &g.edges);
    let per_edge: Vec<((usize, usize), f64)> = g
        .edges
        .iter()
        .map(|&(i, j)| ((i, j), curvature_from_sets(&adj, i, j)))
        .collect();
    let min = per_edge.iter().map(|&(_, c)| c).fold(f64::INFINITY, f64::min);
    let max = per_edge
        .iter()
        .map(|&(_, c)| c)
        .fold(f64::NEG_INFINITY, f64::max);
    let neg = per_edge.iter().filter(|&&(_, c)| c < 0.0).count();
    Ok(CurvatureReport {
        fraction_negative: neg as f64 / g.edges.len() as f64,
        per_edge,
        min,
        max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RewireParams {
    pub max_iters: usize,
    /// Softmax temperature over candidate curvature improvements.
    pub temperature: f64,
    /// Remove the max-curvature edge only when its curvature exceeds this;
    /// absent disables removal.
    pub removal_threshold: Option<f64>,
    /// Stop once the minimum curvature exceeds this; absent runs to
    /// max_iters.
    pub curvature_floor: Option<f64>,
}

impl Default for RewireParams {
    fn default() -> Self {
        RewireParams {
            max_iters: 10,
            temperature: 5.0,
            removal_threshold: None,
            curvature_floor: Some(0.0),
        }
    }
}

/// Outcome of a rewiring run. Node data is untouched; only edges change.
#[derive(Debug, Clone)]
pub struct RewireResult {
    pub graph: Graph,
    pub added: Vec<(usize, usize)>,
    pub removed: Vec<(usize, usize)>,
    pub delta_edges: i64,
    /// (iteration, min curvature, max curvature) before each surgery step.
    pub curvature_trace: Vec<(usize, f64, f64)>,
}

/// Stochastic curvature rewiring: at each iteration, find the most negative
/// edge, sample a support edge to add around it (softmax over the curvature
/// improvement each candidate brings), then drop the most positive edge if
/// it exceeds the removal threshold. Deterministic per seed.
pub fn sdrf_rewire(g: &Graph, params: &RewireParams, seed: u64) -> Result<RewireResult> {
    if g.edges.is_empty() {
        return Err(FkdError::EmptyEdgeSet);
    }
    let mut rng = substream(seed, "rewire");
    let mut edges: Vec<(usize, usize)> = g.edges.clone();
    let mut added = Vec::new();
    let mut removed = Vec::new();
    let mut trace = Vec::new();

    for iter in 0..params.max_iters {
        let adj = neighbor_sets(g.n, &edges);
        let curv: Vec<f64> = edges
            .iter()
            .map(|&(i, j)| curvature_from_sets(&adj, i, j))
            .collect();
        let (mut min_idx, mut min_c) = (0usize, f64::INFINITY);
        for (k, &c) in curv.iter().enumerate() {
            if c < min_c {
                min_c = c;
                min_idx = k;
            }
        }
        let max_c = curv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        trace.push((iter, min_c, max_c));

        // Addition step, skipped once the minimum curvature clears the
        // floor; removal may keep going, so the edge count can shrink.
        let wants_add = params.curvature_floor.map_or(true, |floor| min_c <= floor);
        let mut new_edge = None;
        if wants_add {
            let (i, j) = edges[min_idx];
            // Candidate support edges: one endpoint in B1(i), the other in
            // B1(j).
            let mut candidates = Vec::new();
            let mut ball_i: Vec<usize> = adj[i].iter().copied().collect();
            ball_i.push(i);
            ball_i.sort_unstable();
            let mut ball_j: Vec<usize> = adj[j].iter().copied().collect();
            ball_j.push(j);
            ball_j.sort_unstable();
            let edge_set: HashSet<(usize, usize)> = edges.iter().copied().collect();
            for &k in &ball_i {
                for &l in &ball_j {
                    if k == l {
                        continue;
                    }
                    let e = (k.min(l), k.max(l));
                    if edge_set.contains(&e) {
                        continue;
                    }
                    candidates.push(e);
                }
            }
            candidates.sort_unstable();
            candidates.dedup();
            if candidates.is_empty() && iter == 0 && params.removal_threshold.is_none() {
                return Err(FkdError::RewireSaturated);
            }
            if !candidates.is_empty() {
                // Improvement of the bottleneck edge's curvature per
                // candidate, sampled through a softmax.
                let improvements: Vec<f64> = candidates
                    .iter()
                    .map(|&(k, l)| {
                        let mut adj2 = adj.clone();
                        adj2[k].insert(l);
                        adj2[l].insert(k);
                        curvature_from_sets(&adj2, i, j) - min_c
                    })
                    .collect();
                let max_x = improvements
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = improvements
                    .iter()
                    .map(|&x| (params.temperature * (x - max_x)).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut chosen = candidates.len() - 1;
                for (k, &w) in weights.iter().enumerate() {
                    pick -= w;
                    if pick <= 0.0 {
                        chosen = k;
                        break;
                    }
                }
                let e = candidates[chosen];
                edges.push(e);
                edges.sort_unstable();
                added.push(e);
                new_edge = Some(e);
            }
        }

        // Removal step; the edge added this iteration is never dropped.
        let mut removed_any = false;
        if let Some(threshold) = params.removal_threshold {
            let adj = neighbor_sets(g.n, &edges);
            let mut best: Option<(usize, f64)> = None;
            for (k, &(a, b)) in edges.iter().enumerate() {
                if Some((a, b)) == new_edge {
                    continue;
                }
                let c = curvature_from_sets(&adj, a, b);
                if best.map_or(true, |(_, bc)| c > bc) {
                    best = Some((k, c));
                }
            }
            if let Some((k, c)) = best {
                if c > threshold {
                    let e = edges.remove(k);
                    removed_any = true;
                    // An edge added in an earlier iteration may be removed;
                    // account for it in the change lists.
                    if let Some(pos) = added.iter().position(|&a| a == e) {
                        added.remove(pos);
                    } else {
                        removed.push(e);
                    }
                }
            }
        }

        if new_edge.is_none() && !removed_any {
            break;
        }
    }

    let mut new_graph = g.clone();
    new_graph.edges = edges;
    new_graph.validate()?;
    let delta = added.len() as i64 - removed.len() as i64;
    Ok(RewireResult {
        graph: new_graph,
        added,
        removed,
        delta_edges: delta,
        curvature_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;

    fn graph_from_edges(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph {
            n,
            edges: edges.to_vec(),
            x: Mat::zeros(n, 1),
            y: vec![0; n],
            c: 1,
        }
    }

    fn path(n: usize) -> Graph {
        graph_from_edges(n, &(0..n - 1).map(|i| (i, i + 1)).collect::<Vec<_>>())
    }

    #[test]
    fn triangle_edges_are_positively_curved() {
        let g = graph_from_edges(3, &[(0, 1), (0, 2), (1, 2)]);
        for &e in &g.edges {
            let c = balanced_forman_curvature(&g, e).unwrap();
            assert!(c > 0.0, "edge {e:?} curvature {c}");
        }
    }

    #[test]
    fn complete_graphs_are_positively_curved() {
        for n in 3..7 {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    edges.push((i, j));
                }
            }
            let g = graph_from_edges(n, &edges);
            for &e in &g.edges {
                assert!(balanced_forman_curvature(&g, e).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn path_center_edge_is_negatively_curved() {
        let g = path(5);
        let c = balanced_forman_curvature(&g, (1, 2)).unwrap();
        assert!(c < 0.0, "center edge curvature {c}");
    }

    #[test]
    fn curvature_is_symmetric_in_edge_orientation() {
        let g = graph_from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]);
        for &(i, j) in &g.edges {
            let a = balanced_forman_curvature(&g, (i, j)).unwrap();
            let b = balanced_forman_curvature(&g, (j, i)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn non_edge_query_errors() {
        let g = path(4);
        assert!(matches!(
            balanced_forman_curvature(&g, (0, 3)),
            Err(FkdError::NonEdge(0, 3))
        ));
    }

    #[test]
    fn four_cycle_term_contributes() {
        // C4 has no triangles; every edge sits on one 4-cycle.
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let c = balanced_forman_curvature(&g, (0, 1)).unwrap();
        // degrees are 3 (augmented); without the square term this would be
        // 2/3 + 2/3 - 2 = -2/3.
        assert!(c > -2.0 / 3.0 + 1e-12, "square support missing: {c}");
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let g = path(6);
        let params = RewireParams {
            max_iters: 0,
            ..Default::default()
        };
        let res = sdrf_rewire(&g, &params, 1).unwrap();
        assert_eq!(res.graph.edges, g.edges);
        assert_eq!(res.delta_edges, 0);
        assert!(res.added.is_empty() && res.removed.is_empty());
    }

    #[test]
    fn p5_min_curvature_strictly_increases() {
        let g = path(5);
        let before = curvature_report(&g).unwrap().min;
        let params = RewireParams {
            max_iters: 5,
            temperature: 5.0,
            removal_threshold: None,
            curvature_floor: None,
        };
        let res = sdrf_rewire(&g, &params, 3).unwrap();
        let after = curvature_report(&res.graph).unwrap().min;
        assert!(after > before, "min curvature {before} -> {after}");
    }

    #[test]
    fn rewiring_preserves_node_data() {
        let mut g = path(7);
        g.x = Mat::from_fn(7, 2, |i, j| (i + j) as f64);
        g.y = vec![0, 1, 0, 1, 0, 1, 0];
        g.c = 2;
        let res = sdrf_rewire(&g, &RewireParams::default(), 5).unwrap();
        assert_eq!(res.graph.x.data(), g.x.data());
        assert_eq!(res.graph.y, g.y);
        assert_eq!(res.graph.n, g.n);
    }

    #[test]
    fn deterministic_per_seed() {
        let g = path(8);
        let params = RewireParams {
            max_iters: 6,
            ..Default::default()
        };
        let a = sdrf_rewire(&g, &params, 9).unwrap();
        let b = sdrf_rewire(&g, &params, 9).unwrap();
        assert_eq!(a.graph.edges, b.graph.edges);
        assert_eq!(a.added, b.added);
    }

    #[test]
    fn p8_min_curvature_improves_across_seeds() {
        let g = path(8);
        let before = curvature_report(&g).unwrap().min;
        let params = RewireParams {
            max_iters: 10,
            temperature: 5.0,
            removal_threshold: None,
            curvature_floor: None,
        };
        let mut improved = 0;
        for seed in 0..10 {
            let res = sdrf_rewire(&g, &params, seed).unwrap();
            let after = curvature_report(&res.graph).unwrap().min;
            if after >= before {
                improved += 1;
            }
        }
        assert!(improved >= 9, "only {improved}/10 runs improved");
    }

    #[test]
    fn delta_edges_can_be_negative() {
        // A complete graph has every curvature positive, so with the default
        // floor the addition step never fires and removals dominate.
        let mut edges = Vec::new();
        for i in 0..6 {
            for j in i + 1..6 {
                edges.push((i, j));
            }
        }
        let g = graph_from_edges(6, &edges);
        let params = RewireParams {
            max_iters: 5,
            temperature: 5.0,
            removal_threshold: Some(0.2),
            curvature_floor: Some(0.0),
        };
        let res = sdrf_rewire(&g, &params, 7).unwrap();
        assert!(res.delta_edges < 0, "delta {}", res.delta_edges);
        assert_eq!(
            res.graph.edges.len() as i64,
            g.edges.len() as i64 + res.delta_edges
        );
    }

    #[test]
    fn removal_threshold_can_shrink_edge_count() {
        // A graph with a dense positively-curved clump and a path tail: with
        // an aggressive threshold the rewiring removes more than it adds.
        let mut edges = vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        edges.extend([(3, 4), (4, 5), (5, 6), (6, 7)]);
        let g = graph_from_edges(8, &edges);
        let params = RewireParams {
            max_iters: 4,
            temperature: 5.0,
            removal_threshold: Some(0.3),
            curvature_floor: None,
        };
        let res = sdrf_rewire(&g, &params, 2).unwrap();
        assert!(!res.removed.is_empty(), "nothing was removed");
        assert_eq!(
            res.delta_edges,
            res.graph.edges.len() as i64 - g.edges.len() as i64
        );
    }
}
