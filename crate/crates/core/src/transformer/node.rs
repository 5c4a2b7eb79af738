use std::fmt;

use serde::{Deserialize, Serialize};

/// A named activation in the model's computation graph.
///
/// Positions and heads are 0-based. Layer 0 is the input word embedding;
/// layers `1..=L` are transformer block outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeId {
    /// `h^0_pos`, the (possibly interpolated) word embedding.
    Input { pos: usize },
    /// `h^layer_pos`, output of block `layer`.
    Layer { layer: usize, pos: usize },
    /// Output of attention head `head` in block `layer` at target `pos`.
    Head { layer: usize, head: usize, pos: usize },
    /// Residual copy of `h^{layer-1}_pos` entering the attention sum of `layer`.
    Skip { layer: usize, pos: usize },
    /// Output logits row at `pos`.
    Logits { pos: usize },
    Qoi,
}

impl NodeId {
    pub fn embedding(layer: usize, pos: usize) -> Self {
        if layer == 0 {
            NodeId::Input { pos }
        } else {
            NodeId::Layer { layer, pos }
        }
    }

    /// Layer index: 0 for inputs, `l` for block-`l` nodes (heads and skips
    /// belong to the block they feed), `usize::MAX` for logits and qoi.
    pub fn layer(&self) -> usize {
        match *self {
            NodeId::Input { .. } => 0,
            NodeId::Layer { layer, .. } | NodeId::Head { layer, .. } | NodeId::Skip { layer, .. } => {
                layer
            }
            NodeId::Logits { .. } | NodeId::Qoi => usize::MAX,
        }
    }

    pub fn pos(&self) -> Option<usize> {
        match *self {
            NodeId::Input { pos }
            | NodeId::Layer { pos, .. }
            | NodeId::Head { pos, .. }
            | NodeId::Skip { pos, .. }
            | NodeId::Logits { pos } => Some(pos),
            NodeId::Qoi => None,
        }
    }

    /// True for `h^l` nodes including inputs.
    pub fn is_embedding(&self) -> bool {
        matches!(self, NodeId::Input { .. } | NodeId::Layer { .. })
    }

    pub fn is_intra_layer(&self) -> bool {
        matches!(self, NodeId::Head { .. } | NodeId::Skip { .. })
    }

    /// Sort key consistent with data flow: earlier keys never depend on later ones.
    pub fn topo_key(&self) -> (usize, u8, usize, usize) {
        match *self {
            NodeId::Input { pos } => (0, 2, pos, 0),
            NodeId::Skip { layer, pos } => (layer, 0, pos, usize::MAX),
            NodeId::Head { layer, head, pos } => (layer, 0, pos, head),
            NodeId::Layer { layer, pos } => (layer, 2, pos, 0),
            NodeId::Logits { pos } => (usize::MAX, 0, pos, 0),
            NodeId::Qoi => (usize::MAX, 1, 0, 0),
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NodeId::Input { pos } => write!(f, "x_{pos}"),
            NodeId::Layer { layer, pos } => write!(f, "h^{layer}_{pos}"),
            NodeId::Head { layer, head, pos } => write!(f, "a^{{{layer},{head}}}_{pos}"),
            NodeId::Skip { layer, pos } => write!(f, "s^{layer}_{pos}"),
            NodeId::Logits { pos } => write!(f, "y_{pos}"),
            NodeId::Qoi => write!(f, "qoi"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let n = NodeId::Head {
            layer: 2,
            head: 1,
            pos: 3,
        };
        let s = serde_json::to_string(&n).unwrap();
        assert_eq!(s, r#"{"kind":"head","layer":2,"head":1,"pos":3}"#);
        assert_eq!(serde_json::from_str::<NodeId>(&s).unwrap(), n);
        assert_eq!(serde_json::to_string(&NodeId::Qoi).unwrap(), r#"{"kind":"qoi"}"#);
    }

    #[test]
    fn topo_order_within_block() {
        let prev = NodeId::embedding(0, 4);
        let skip = NodeId::Skip { layer: 1, pos: 0 };
        let head = NodeId::Head {
            layer: 1,
            head: 0,
            pos: 0,
        };
        let out = NodeId::embedding(1, 0);
        assert!(prev.topo_key() < skip.topo_key());
        assert!(head.topo_key() < skip.topo_key());
        assert!(skip.topo_key() < out.topo_key());
        assert!(out.topo_key() < NodeId::Qoi.topo_key());
    }
}
