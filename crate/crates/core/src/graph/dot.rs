use std::fmt::Write;

use super::{EdgeType, HeteroTrafficGraph, Segment};

/// Graphviz rendering; edge types appear as a `type` attribute.
pub fn to_dot(g: &HeteroTrafficGraph, name: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "graph \"{}\" {{", name.replace('"', "'"));
    let _ = writeln!(s, "  // {}-bit units", g.bit_width);
    for (i, node) in g.nodes.iter().enumerate() {
        let (seg, shape) = match node.segment {
            Segment::Header => ("h", "box"),
            Segment::Payload => ("p", "ellipse"),
        };
        let _ = writeln!(
            s,
            "  n{i} [label=\"{seg}:{}\", segment={seg}, shape={shape}];",
            node.value
        );
    }
    for ty in EdgeType::ALL {
        let style = match ty {
            EdgeType::HeaderHeader => "solid",
            EdgeType::PayloadPayload => "dashed",
            EdgeType::HeaderPayload => "dotted",
        };
        for &(a, b) in g.edges_of(ty) {
            let _ = writeln!(s, "  n{a} -- n{b} [type={}, style={style}];", ty.short_name());
        }
    }
    s.push_str("}\n");
    s
}
