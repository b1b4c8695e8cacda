// SPDX-License-Identifier: MIT OR Apache-2.0

//! Graphviz and CSV renderings of circuits and per-edge measurements.

use std::fmt::Write as _;

use crate::error::Result;
use crate::metrics::EdgeFaithfulnessRecord;
use crate::model::{Circuit, ComputationalGraph, Reader, Writer};

/// Component node a reader belongs to, and the input stream label if any.
fn reader_node(r: Reader) -> (String, Option<&'static str>) {
    match r {
        Reader::Head { layer, head, stream } => {
            let label = match stream {
                crate::model::Stream::Q => "q",
                crate::model::Stream::K => "k",
                crate::model::Stream::V => "v",
            };
            (Writer::Head { layer, head }.to_string(), Some(label))
        }
        Reader::Mlp { layer } => (Writer::Mlp { layer }.to_string(), None),
        Reader::Logits => ("logits".to_string(), None),
    }
}

/// DOT digraph with one node per component (`embed`, `a{l}.h{h}`, `m{l}`,
/// `logits`) and one arrow per kept edge. Arrows into attention heads are
/// labelled with the input they feed.
pub fn circuit_to_dot(graph: &ComputationalGraph, circuit: &Circuit) -> Result<String> {
    circuit.check(graph)?;
    let mut out = String::from("digraph circuit {\n  rankdir=BT;\n  node [shape=box];\n");
    for w in graph.writers() {
        let shape = match w {
            Writer::Embed => "invhouse",
            Writer::Head { .. } => "box",
            Writer::Mlp { .. } => "ellipse",
        };
        writeln!(out, "  \"{w}\" [shape={shape}];").expect("write to string");
    }
    out.push_str("  \"logits\" [shape=house];\n");
    for e in circuit.kept_edges(graph) {
        let (node, label) = reader_node(e.dst);
        match label {
            Some(l) => writeln!(out, "  \"{}\" -> \"{node}\" [label=\"{l}\"];", e.src),
            None => writeln!(out, "  \"{}\" -> \"{node}\";", e.src),
        }
        .expect("write to string");
    }
    out.push_str("}\n");
    Ok(out)
}

pub const FAITHFULNESS_CSV_HEADER: &str = "edge_id,src,dst,m_e,c_e";

/// One row per probed edge: its effect on the full model and on the circuit.
pub fn faithfulness_csv(records: &[EdgeFaithfulnessRecord]) -> String {
    let mut out = format!("{FAITHFULNESS_CSV_HEADER}\n");
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.edge_index, r.src, r.dst, r.m_e, r.c_e).expect("write to string");
    }
    out
}
