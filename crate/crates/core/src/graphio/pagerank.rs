//! Power-iteration PageRank with uniform redistribution of dangling mass.

use std::collections::BTreeMap;

pub const DEFAULT_DAMPING: f64 = 0.85;
pub const DEFAULT_ITERATIONS: usize = 100;

/// Scores every node that appears in `edges`. Parallel edges count with
/// multiplicity. Scores sum to one.
pub fn pagerank<N: Ord + Clone>(edges: &[(N, N)], damping: f64, iterations: usize) -> BTreeMap<N, f64> {
    pagerank_with_nodes(&[], edges, damping, iterations)
}

/// As [`pagerank`], additionally scoring `nodes` that may have no edges.
/// Edge-less nodes are dangling and share their mass uniformly.
pub fn pagerank_with_nodes<N: Ord + Clone>(
    nodes: &[N],
    edges: &[(N, N)],
    damping: f64,
    iterations: usize,
) -> BTreeMap<N, f64> {
    assert!(damping > 0.0 && damping < 1.0, "damping must lie in (0, 1)");
    assert!(iterations >= 1, "at least one iteration");
    let mut all: Vec<N> = nodes.to_vec();
    for (a, b) in edges {
        all.push(a.clone());
        all.push(b.clone());
    }
    all.sort();
    all.dedup();
    let n = all.len();
    if n == 0 {
        return BTreeMap::new();
    }
    let pairs: Vec<(usize, usize)> = edges
        .iter()
        .map(|(a, b)| (all.binary_search(a).unwrap(), all.binary_search(b).unwrap()))
        .collect();
    let mut out_deg = vec![0usize; n];
    for &(a, _) in &pairs {
        out_deg[a] += 1;
    }
    let uniform = 1.0 / n as f64;
    let mut rank = vec![uniform; n];
    let mut next = vec![0.0; n];
    for _ in 0..iterations {
        let dangling: f64 = (0..n).filter(|&i| out_deg[i] == 0).map(|i| rank[i]).sum();
        let base = (1.0 - damping) * uniform + damping * dangling * uniform;
        next.iter_mut().for_each(|x| *x = base);
        for &(a, b) in &pairs {
            next[b] += damping * rank[a] / out_deg[a] as f64;
        }
        std::mem::swap(&mut rank, &mut next);
    }
    all.into_iter().zip(rank).collect()
}
