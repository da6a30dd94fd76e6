use rand::Rng;

use super::AugmentConfig;
use crate::graph::HeteroTrafficGraph;

/// Random walk with restart over the union of all edge types, starting at
/// a uniformly chosen node; returns the induced subgraph on the visited
/// nodes and the start node's index in the input.
pub fn random_walk_subgraph<R: Rng + ?Sized>(
    g: &HeteroTrafficGraph,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (HeteroTrafficGraph, usize) {
    let n = g.num_nodes();
    if n <= 1 {
        return (g.clone(), 0);
    }
    let adj = g.all_neighbors();
    let start = rng.gen_range(0..n);
    let target = ((cfg.walk_target_fraction * n as f64).ceil() as usize).clamp(1, n);
    let max_steps = cfg.max_walk_steps_factor * n;
    let mut visited = vec![false; n];
    visited[start] = true;
    let mut count = 1;
    let mut cur = start;
    let mut steps = 0;
    while count < target && steps < max_steps {
        steps += 1;
        if rng.gen::<f64>() < cfg.restart_prob || adj[cur].is_empty() {
            cur = start;
            continue;
        }
        cur = adj[cur][rng.gen_range(0..adj[cur].len())] as usize;
        if !visited[cur] {
            visited[cur] = true;
            count += 1;
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&i| visited[i]).collect();
    let start_out = keep.iter().position(|&i| i == start).expect("start is visited");
    (g.induced_subgraph(&keep), start_out)
}

/// Random-walk augmentation; see [`random_walk_subgraph`].
pub fn augment_random_walk<R: Rng + ?Sized>(
    g: &HeteroTrafficGraph,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> HeteroTrafficGraph {
    random_walk_subgraph(g, cfg, rng).0
}

/// Replaces each node's unit value `v` by its complement `2^N - 1 - v`
/// with probability `flip_prob`.
pub fn augment_feature_flip<R: Rng + ?Sized>(
    g: &HeteroTrafficGraph,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> HeteroTrafficGraph {
    let mut out = g.clone();
    let max = ((1u32 << g.bit_width) - 1) as u16;
    for node in &mut out.nodes {
        if rng.gen::<f64>() < cfg.flip_prob {
            node.value = max - node.value;
        }
    }
    out
}

/// Keep mask for the packets of one flow: each packet is dropped with
/// probability `drop_prob`; if all are dropped, one uniformly chosen packet
/// is kept.
pub fn drop_packets<R: Rng + ?Sized>(len: usize, drop_prob: f64, rng: &mut R) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..len).map(|_| rng.gen::<f64>() >= drop_prob).collect();
    if len > 0 && !keep.iter().any(|&k| k) {
        keep[rng.gen_range(0..len)] = true;
    }
    keep
}
