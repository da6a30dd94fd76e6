use std::rc::Rc;

use crate::graph::{EdgeType, HeteroTrafficGraph};
use crate::tensor::Adjacency;

/// Several graphs of one view packed as a disjoint union, so one forward
/// pass encodes all of them.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub bit_width: u32,
    /// Embedding rows (node unit values), graph after graph.
    pub lookup: Rc<Vec<Option<u32>>>,
    /// Per edge type, in [`EdgeType::ALL`] order.
    pub adjacency: [Rc<Adjacency>; 3],
    /// Union of all edge types, for the homogeneous variant.
    pub merged: Rc<Adjacency>,
    /// Graph index of every node.
    pub segment: Rc<Vec<u32>>,
    pub num_graphs: usize,
}

impl GraphBatch {
    /// Packs `graphs`; every graph must have at least one node and share
    /// `bit_width`.
    pub fn new(bit_width: u32, graphs: &[&HeteroTrafficGraph]) -> Self {
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut values = Vec::with_capacity(total);
        let mut segment = Vec::with_capacity(total);
        let mut typed: [Vec<Vec<u32>>; 3] = Default::default();
        let mut merged = Vec::with_capacity(total);
        for (gi, g) in graphs.iter().enumerate() {
            debug_assert_eq!(g.bit_width, bit_width);
            debug_assert!(g.num_nodes() > 0);
            let base = values.len() as u32;
            values.extend(g.nodes.iter().map(|n| Some(u32::from(n.value))));
            segment.extend(std::iter::repeat_n(gi as u32, g.num_nodes()));
            for ty in EdgeType::ALL {
                typed[ty.index()].extend(
                    g.neighbors(ty)
                        .into_iter()
                        .map(|l| l.into_iter().map(|u| u + base).collect::<Vec<_>>()),
                );
            }
            merged.extend(
                g.all_neighbors()
                    .into_iter()
                    .map(|l| l.into_iter().map(|u| u + base).collect::<Vec<_>>()),
            );
        }
        let [hh, pp, hp] = typed;
        GraphBatch {
            bit_width,
            lookup: Rc::new(values),
            adjacency: [
                Rc::new(Adjacency::from_lists(&hh)),
                Rc::new(Adjacency::from_lists(&pp)),
                Rc::new(Adjacency::from_lists(&hp)),
            ],
            merged: Rc::new(Adjacency::from_lists(&merged)),
            segment: Rc::new(segment),
            num_graphs: graphs.len(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.lookup.len()
    }
}
