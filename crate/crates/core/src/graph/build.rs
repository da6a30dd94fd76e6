use std::collections::{BTreeMap, BTreeSet};

use super::pmi::{build_segment_edges, WindowCounts};
use super::{HeteroTrafficGraph, Node, PmiConfig, Segment};
use crate::capture::PacketRecord;
use crate::error::{GraphError, UnitError};
use crate::units::{tokenize_packet_view, UnitSequence};

pub fn build_hetero_graph(
    units: &UnitSequence,
    cfg: &PmiConfig,
) -> Result<HeteroTrafficGraph, GraphError> {
    cfg.validate()?;
    let n = units.bit_width;
    if units.header_units.is_empty() {
        return Err(UnitError::DegenerateSegment {
            segment: "header",
            bit_width: n,
        }
        .into());
    }
    if units.payload_units.is_empty() {
        return Err(UnitError::DegenerateSegment {
            segment: "payload",
            bit_width: n,
        }
        .into());
    }

    let header_values: BTreeSet<u16> = units.header_units.iter().copied().collect();
    let payload_values: BTreeSet<u16> = units.payload_units.iter().copied().collect();
    let mut nodes = Vec::with_capacity(header_values.len() + payload_values.len());
    let mut header_idx = BTreeMap::new();
    let mut payload_idx = BTreeMap::new();
    for &v in &header_values {
        header_idx.insert(v, nodes.len() as u32);
        nodes.push(Node {
            segment: Segment::Header,
            value: v,
        });
    }
    for &v in &payload_values {
        payload_idx.insert(v, nodes.len() as u32);
        nodes.push(Node {
            segment: Segment::Payload,
            value: v,
        });
    }

    let hh: Vec<(u32, u32)> = build_segment_edges(&units.header_units, cfg)
        .into_iter()
        .map(|(a, b)| (header_idx[&a], header_idx[&b]))
        .collect();
    let pp: Vec<(u32, u32)> = build_segment_edges(&units.payload_units, cfg)
        .into_iter()
        .map(|(a, b)| (payload_idx[&a], payload_idx[&b]))
        .collect();

    let mut full = Vec::with_capacity(units.header_units.len() + units.payload_units.len());
    full.extend_from_slice(&units.header_units);
    full.extend_from_slice(&units.payload_units);
    let mut hp = BTreeSet::new();
    for (u, v) in WindowCounts::new(&full, cfg.window_size).positive_pairs() {
        for (h, p) in [(u, v), (v, u)] {
            if let (Some(&hi), Some(&pi)) = (header_idx.get(&h), payload_idx.get(&p)) {
                hp.insert((hi, pi));
            }
        }
    }

    Ok(HeteroTrafficGraph {
        bit_width: n,
        nodes,
        edges: [hh, pp, hp.into_iter().collect()],
    })
}

/// One graph per configured view.
pub fn build_views(
    pkt: &PacketRecord,
    views: &[u32],
    cfg: &PmiConfig,
) -> Result<BTreeMap<u32, HeteroTrafficGraph>, GraphError> {
    views
        .iter()
        .map(|&n| {
            let units = tokenize_packet_view(pkt, n)?;
            Ok((n, build_hetero_graph(&units, cfg)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::Direction;
    use crate::graph::{build_segment_edges, EdgeType};
    use proptest::prelude::*;

    fn seq(n: u32, h: &[u16], p: &[u16]) -> UnitSequence {
        UnitSequence {
            bit_width: n,
            header_units: h.to_vec(),
            payload_units: p.to_vec(),
        }
    }

    #[test]
    fn values_are_deduplicated_per_segment() {
        let g = build_hetero_graph(&seq(4, &[1, 2], &[1, 3]), &PmiConfig::default()).unwrap();
        let nodes: Vec<_> = g.nodes.iter().map(|n| (n.segment, n.value)).collect();
        assert_eq!(
            nodes,
            vec![
                (Segment::Header, 1),
                (Segment::Header, 2),
                (Segment::Payload, 1),
                (Segment::Payload, 3)
            ]
        );
    }

    #[test]
    fn segment_edges_follow_segment_pmi() {
        let cfg = PmiConfig { window_size: 2 };
        let g = build_hetero_graph(&seq(4, &[1, 1, 2, 3], &[4, 5, 5]), &cfg).unwrap();
        // header nodes are 1,2,3 at indices 0,1,2
        assert_eq!(g.edges_of(EdgeType::HeaderHeader), &[(1, 2)]);
        assert!(g.edges_of(EdgeType::PayloadPayload).is_empty());
        // full sequence 1,1,2,3,4,5,5: PMI(3,4) = ln(3/2) across the boundary
        assert_eq!(g.edges_of(EdgeType::HeaderPayload), &[(2, 3)]);
        g.check_invariants().unwrap();
    }

    #[test]
    fn default_views_give_two_graphs() {
        let pkt = PacketRecord {
            header_bytes: vec![0x45, 0x00, 0x00, 0x30, 0x12],
            payload_bytes: vec![0xde, 0xad, 0xbe, 0xef, 0x01],
            direction: Direction::Forward,
            timestamp_us: 0,
        };
        let graphs = build_views(&pkt, &[4, 8], &PmiConfig::default()).unwrap();
        assert_eq!(graphs.keys().copied().collect::<Vec<_>>(), vec![4, 8]);
        let again = build_views(&pkt, &[4, 8], &PmiConfig::default()).unwrap();
        assert_eq!(graphs, again);
    }

    proptest! {
        #[test]
        fn graph_invariants_hold(
            n_idx in 0usize..5,
            header in prop::collection::vec(0u16..1024, 1..40),
            payload in prop::collection::vec(0u16..1024, 1..60),
            w in 2usize..8,
        ) {
            let n = crate::units::SUPPORTED_WIDTHS[n_idx];
            let mask = (1u16 << n) - 1;
            let h: Vec<u16> = header.iter().map(|v| v & mask).collect();
            let p: Vec<u16> = payload.iter().map(|v| v & mask).collect();
            let cfg = PmiConfig { window_size: w };
            let g = build_hetero_graph(&seq(n, &h, &p), &cfg).unwrap();
            prop_assert!(g.check_invariants().is_ok(), "{:?}", g.check_invariants());

            let distinct_h: BTreeSet<_> = h.iter().collect();
            let distinct_p: BTreeSet<_> = p.iter().collect();
            prop_assert_eq!(g.num_nodes(), distinct_h.len() + distinct_p.len());
            prop_assert!(g.num_nodes() <= 2 * (1usize << n));

            // the header-header subgraph is exactly the header segment edge set
            let hh: BTreeSet<(u16, u16)> = g.edges_of(EdgeType::HeaderHeader).iter()
                .map(|&(a, b)| (g.nodes[a as usize].value, g.nodes[b as usize].value))
                .collect();
            prop_assert_eq!(hh, build_segment_edges(&h, &cfg));
        }

        #[test]
        fn repetition_never_links_values_that_never_share_a_window(
            s in prop::collection::vec(0u16..6, 1..20),
        ) {
            let cfg = PmiConfig::default();
            let doubled: Vec<u16> = s.iter().chain(s.iter()).copied().collect();
            let edges = build_segment_edges(&doubled, &cfg);
            let counts = WindowCounts::new(&doubled, cfg.window_size);
            for (a, b) in edges {
                prop_assert!(counts.pair_count(a, b) > 0);
            }
        }
    }
}
