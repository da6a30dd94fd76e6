//! Versioned binary cache of built graphs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "UGRAPHS\0"
//! u32    version
//! u32    flow count
//! per flow:   u32 label, u32 packet count
//!   per packet: u32 view count
//!     per view: u32 bit width, u32 node count, per node (u8 segment, u16 value),
//!               3 x (u32 edge count, per edge u32 a, u32 b)   in hh, pp, hp order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{HeteroTrafficGraph, Node, Segment};
use crate::error::{Error, GraphError};

pub const CACHE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UGRAPHS\0";

/// Graphs of every packet in one flow, keyed by view width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowGraphs {
    pub label: usize,
    pub packets: Vec<BTreeMap<u32, HeteroTrafficGraph>>,
}

pub fn write_graph_cache(flows: &[FlowGraphs], path: impl AsRef<Path>) -> crate::Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(flows)).map_err(|e| Error::io(path, e))
}

pub fn read_graph_cache(path: impl AsRef<Path>) -> crate::Result<Vec<FlowGraphs>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn encode(flows: &[FlowGraphs]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put(&mut out, CACHE_VERSION);
    put(&mut out, flows.len() as u32);
    for flow in flows {
        put(&mut out, flow.label as u32);
        put(&mut out, flow.packets.len() as u32);
        for views in &flow.packets {
            put(&mut out, views.len() as u32);
            for (&n, g) in views {
                put(&mut out, n);
                put(&mut out, g.nodes.len() as u32);
                for node in &g.nodes {
                    out.push(match node.segment {
                        Segment::Header => 0,
                        Segment::Payload => 1,
                    });
                    out.extend_from_slice(&node.value.to_le_bytes());
                }
                for list in &g.edges {
                    put(&mut out, list.len() as u32);
                    for &(a, b) in list {
                        put(&mut out, a);
                        put(&mut out, b);
                    }
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], GraphError> {
        if self.bytes.len() - self.pos < n {
            return Err(GraphError::Cache(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GraphError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Vec<FlowGraphs>, GraphError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(GraphError::Cache("not a graph cache".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(GraphError::Cache(format!("unsupported version {version}")));
    }
    let num_flows = r.u32()?;
    let mut flows = Vec::new();
    for _ in 0..num_flows {
        let label = r.u32()? as usize;
        let num_packets = r.u32()?;
        let mut packets = Vec::new();
        for _ in 0..num_packets {
            let num_views = r.u32()?;
            let mut views = BTreeMap::new();
            for _ in 0..num_views {
                let bit_width = r.u32()?;
                let num_nodes = r.u32()?;
                let mut nodes = Vec::new();
                for _ in 0..num_nodes {
                    let b = r.take(3)?;
                    let segment = match b[0] {
                        0 => Segment::Header,
                        1 => Segment::Payload,
                        s => return Err(GraphError::Cache(format!("bad segment tag {s}"))),
                    };
                    nodes.push(Node {
                        segment,
                        value: u16::from_le_bytes([b[1], b[2]]),
                    });
                }
                let mut edges: [Vec<(u32, u32)>; 3] = Default::default();
                for list in &mut edges {
                    let m = r.u32()?;
                    for _ in 0..m {
                        list.push((r.u32()?, r.u32()?));
                    }
                }
                let g = HeteroTrafficGraph {
                    bit_width,
                    nodes,
                    edges,
                };
                g.check_invariants().map_err(GraphError::Cache)?;
                views.insert(bit_width, g);
            }
            packets.push(views);
        }
        flows.push(FlowGraphs { label, packets });
    }
    if r.pos != bytes.len() {
        return Err(GraphError::Cache("trailing bytes".into()));
    }
    Ok(flows)
}
