//! Heterogeneous traffic graphs.
//!
//! Each packet and view yields one graph. Distinct unit values become nodes,
//! separately for the header and the payload, so a value present in both
//! segments appears as two nodes. Edges come in three types: header-header
//! and payload-payload from PMI over each segment, header-payload from PMI
//! over the concatenated sequence restricted to cross-segment pairs.

mod build;
mod cache;
mod dot;
mod pmi;

pub use build::{build_hetero_graph, build_views};
pub use cache::{read_graph_cache, write_graph_cache, FlowGraphs, CACHE_VERSION};
pub use dot::to_dot;
pub use pmi::{build_segment_edges, pmi, WindowCounts};

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    Header,
    Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node {
    pub segment: Segment,
    pub value: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    HeaderHeader,
    PayloadPayload,
    HeaderPayload,
}

impl EdgeType {
    pub const ALL: [EdgeType; 3] = [
        EdgeType::HeaderHeader,
        EdgeType::PayloadPayload,
        EdgeType::HeaderPayload,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            EdgeType::HeaderHeader => "hh",
            EdgeType::PayloadPayload => "pp",
            EdgeType::HeaderPayload => "hp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PmiConfig {
    pub window_size: usize,
}

impl Default for PmiConfig {
    fn default() -> Self {
        PmiConfig { window_size: 5 }
    }
}

impl PmiConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.window_size < 2 {
            return Err(GraphError::BadWindow(self.window_size));
        }
        Ok(())
    }
}

/// Graph of one packet at one unit width.
///
/// Edges are stored once as `(i, j)` with `i < j` and are undirected.
/// Header-payload edges always have the header node first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeteroTrafficGraph {
    pub bit_width: u32,
    pub nodes: Vec<Node>,
    pub edges: [Vec<(u32, u32)>; 3],
}

impl HeteroTrafficGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges_of(&self, ty: EdgeType) -> &[(u32, u32)] {
        &self.edges[ty.index()]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Node feature: the unit value.
    pub fn node_feature(&self, i: usize) -> u16 {
        self.nodes[i].value
    }

    /// Neighbor lists for one edge type, in ascending neighbor order.
    pub fn neighbors(&self, ty: EdgeType) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in self.edges_of(ty) {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Neighbor lists over the union of all edge types.
    pub fn all_neighbors(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for list in &self.edges {
            for &(a, b) in list {
                adj[a as usize].push(b);
                adj[b as usize].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Copy of this graph without edges of type `ty`.
    pub fn without_edges(&self, ty: EdgeType) -> HeteroTrafficGraph {
        let mut g = self.clone();
        g.edges[ty.index()].clear();
        g
    }

    /// Subgraph induced by `keep` (indices into `nodes`), preserving edge
    /// types and the relative node order.
    pub fn induced_subgraph(&self, keep: &[usize]) -> HeteroTrafficGraph {
        let mut keep: Vec<usize> = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut remap = vec![u32::MAX; self.nodes.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new as u32;
        }
        let nodes = keep.iter().map(|&i| self.nodes[i]).collect();
        let edges = std::array::from_fn(|t| {
            self.edges[t]
                .iter()
                .filter_map(|&(a, b)| {
                    let (na, nb) = (remap[a as usize], remap[b as usize]);
                    (na != u32::MAX && nb != u32::MAX).then_some((na, nb))
                })
                .collect()
        });
        HeteroTrafficGraph {
            bit_width: self.bit_width,
            nodes,
            edges,
        }
    }

    /// Relabels nodes: node `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> HeteroTrafficGraph {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes = self.nodes.clone();
        for (i, &p) in perm.iter().enumerate() {
            nodes[p] = self.nodes[i];
        }
        let edges = std::array::from_fn(|t| {
            let mut list: Vec<(u32, u32)> = self.edges[t]
                .iter()
                .map(|&(a, b)| {
                    let (x, y) = (perm[a as usize] as u32, perm[b as usize] as u32);
                    (x.min(y), x.max(y))
                })
                .collect();
            list.sort_unstable();
            list
        });
        HeteroTrafficGraph {
            bit_width: self.bit_width,
            nodes,
            edges,
        }
    }

    /// Checks every structural invariant; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.nodes.len() as u32;
        let mut seen = std::collections::HashSet::new();
        for node in &self.nodes {
            if u32::from(node.value) >= (1u32 << self.bit_width) {
                return Err(format!("node value {} exceeds {} bits", node.value, self.bit_width));
            }
            if !seen.insert(*node) {
                return Err(format!("duplicate node {node:?}"));
            }
        }
        for ty in EdgeType::ALL {
            let mut pairs = std::collections::HashSet::new();
            for &(a, b) in self.edges_of(ty) {
                if a >= n || b >= n {
                    return Err(format!("{ty:?} edge ({a},{b}) out of range"));
                }
                if a >= b {
                    return Err(format!("{ty:?} edge ({a},{b}) not stored as i < j"));
                }
                if !pairs.insert((a, b)) {
                    return Err(format!("{ty:?} edge ({a},{b}) duplicated"));
                }
                let (sa, sb) = (self.nodes[a as usize].segment, self.nodes[b as usize].segment);
                let ok = match ty {
                    EdgeType::HeaderHeader => sa == Segment::Header && sb == Segment::Header,
                    EdgeType::PayloadPayload => sa == Segment::Payload && sb == Segment::Payload,
                    EdgeType::HeaderPayload => sa != sb,
                };
                if !ok {
                    return Err(format!("{ty:?} edge ({a},{b}) joins {sa:?}-{sb:?}"));
                }
            }
        }
        Ok(())
    }
}
