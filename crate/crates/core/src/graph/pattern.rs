use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::NodeId;

use super::view::{GraphView, Granularity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    /// Non-negative values count as positive.
    pub fn of(v: f64) -> Self {
        if v >= 0.0 {
            Sign::Positive
        } else {
            Sign::Negative
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

/// A node sequence from one input word to the qoi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub nodes: Vec<NodeId>,
    pub influence: f64,
    pub word_index: usize,
    pub sign_tag: Sign,
    /// Word-level attribution that fixed `sign_tag`.
    #[serde(default)]
    pub attribution: f64,
}

impl Pattern {
    /// The unrefined pattern `[x_word, qoi]`.
    pub fn trivial(word_index: usize) -> Self {
        Self {
            nodes: vec![NodeId::Input { pos: word_index }, NodeId::Qoi],
            influence: 0.0,
            word_index,
            sign_tag: Sign::Positive,
            attribution: 0.0,
        }
    }

    pub fn from_nodes(nodes: Vec<NodeId>) -> Result<Self> {
        let word_index = match nodes.first() {
            Some(NodeId::Input { pos }) => *pos,
            _ => return Err(Error::Pattern("pattern must start at an input node".into())),
        };
        if nodes.last() != Some(&NodeId::Qoi) {
            return Err(Error::Pattern("pattern must end at qoi".into()));
        }
        Ok(Self {
            nodes,
            influence: 0.0,
            word_index,
            sign_tag: Sign::Positive,
            attribution: 0.0,
        })
    }

    /// Embedding-level nodes `h^l` (inputs included) in order.
    pub fn embedding_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().copied().filter(NodeId::is_embedding).collect()
    }

    /// True when every node of `self` also appears in `other`.
    pub fn is_sub_pattern_of(&self, other: &Pattern) -> bool {
        self.nodes.iter().all(|n| other.nodes.contains(n))
    }

    /// Intra-layer node chosen in `layer`, if any.
    pub fn intra_node(&self, layer: usize) -> Option<NodeId> {
        self.nodes
            .iter()
            .copied()
            .find(|n| n.is_intra_layer() && n.layer() == layer)
    }

    pub fn signed_influence(&self) -> f64 {
        self.sign_tag.factor() * self.influence
    }

    pub fn validate(&self, view: &GraphView) -> Result<()> {
        view.validate_pattern(&self.nodes)
    }
}

/// One refined pattern per traced word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternCollection {
    pub granularity: Granularity,
    pub patterns: Vec<Pattern>,
}

impl PatternCollection {
    pub fn new(granularity: Granularity) -> Self {
        Self {
            granularity,
            patterns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn positive(&self) -> impl Iterator<Item = &Pattern> {
        self.patterns.iter().filter(|p| p.sign_tag == Sign::Positive)
    }

    pub fn negative(&self) -> impl Iterator<Item = &Pattern> {
        self.patterns.iter().filter(|p| p.sign_tag == Sign::Negative)
    }

    pub fn for_word(&self, word: usize) -> Option<&Pattern> {
        self.patterns.iter().find(|p| p.word_index == word)
    }

    /// Union of nodes over the selected patterns, sorted topologically.
    pub fn retained_nodes<'a>(patterns: impl IntoIterator<Item = &'a Pattern>) -> Vec<NodeId> {
        let mut all: Vec<NodeId> = patterns.into_iter().flat_map(|p| p.nodes.iter().copied()).collect();
        all.sort_by_key(NodeId::topo_key);
        all.dedup();
        all
    }
}
