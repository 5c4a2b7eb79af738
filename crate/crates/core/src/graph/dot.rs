use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::transformer::NodeId;

use super::pattern::{PatternCollection, Sign};
use super::view::GraphView;

fn quote(n: &NodeId) -> String {
    format!("\"{n}\"")
}

/// Graphviz rendering of the embedding-level node grid with the collection's
/// patterns drawn on top. Head steps are solid and labelled with the head
/// index, skip steps dashed; colour follows the pattern sign.
pub fn to_dot(view: &GraphView, collection: &PatternCollection, tokens: Option<&[String]>) -> String {
    let mut out = String::new();
    out.push_str("digraph influence {\n  rankdir=BT;\n  node [shape=box, style=rounded, fontsize=10];\n");
    for layer in 0..=view.layers {
        let _ = writeln!(out, "  subgraph layer_{layer} {{\n    rank=same;");
        for pos in 0..view.len {
            let n = NodeId::embedding(layer, pos);
            let label = match (layer, tokens.and_then(|t| t.get(pos))) {
                (0, Some(tok)) => format!("{n}\\n{tok}"),
                _ => n.to_string(),
            };
            let _ = writeln!(out, "    {} [label=\"{}\"];", quote(&n), label);
        }
        out.push_str("  }\n");
    }
    let _ = writeln!(out, "  {} [shape=ellipse];", quote(&NodeId::Qoi));

    // (from, to, style, label, colour) deduplicated in a stable order
    let mut edges: BTreeSet<(String, String, &str, String, &str)> = BTreeSet::new();
    for p in &collection.patterns {
        let colour = match p.sign_tag {
            Sign::Positive => "green",
            Sign::Negative => "red",
        };
        let mut prev: Option<NodeId> = None;
        let mut via: Option<NodeId> = None;
        for n in &p.nodes {
            if n.is_intra_layer() {
                via = Some(*n);
                continue;
            }
            if let Some(from) = prev {
                let (style, label) = match via.take() {
                    Some(NodeId::Head { head, .. }) => ("solid", head.to_string()),
                    Some(_) => ("dashed", String::new()),
                    None => ("solid", String::new()),
                };
                edges.insert((quote(&from), quote(n), style, label, colour));
            }
            prev = Some(*n);
        }
    }
    for (from, to, style, label, colour) in edges {
        let _ = write!(out, "  {from} -> {to} [color={colour}, style={style}");
        if !label.is_empty() {
            let _ = write!(out, ", label=\"{label}\"");
        }
        out.push_str("];\n");
    }
    out.push_str("}\n");
    out
}
