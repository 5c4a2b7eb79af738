use std::collections::HashMap;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::{ModelConfig, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Embedding,
    Attention,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" | "e" => Ok(Self::Embedding),
            "attention" | "a" => Ok(Self::Attention),
            other => Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Embedding => "embedding",
            Self::Attention => "attention",
        })
    }
}

/// Explicit DAG over one sentence length at one granularity.
#[derive(Debug, Clone)]
pub struct GraphView {
    pub granularity: Granularity,
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    pub mask: usize,
    nodes: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl GraphView {
    pub fn build(
        config: &ModelConfig,
        len: usize,
        mask: usize,
        granularity: Granularity,
    ) -> Result<Self> {
        Self::from_shape(config.layers, config.heads, len, mask, granularity)
            .and_then(|v| {
                if len > config.max_len {
                    Err(Error::Input(format!("length {len} exceeds max_len {}", config.max_len)))
                } else {
                    Ok(v)
                }
            })
    }

    pub fn from_shape(
        layers: usize,
        heads: usize,
        len: usize,
        mask: usize,
        granularity: Granularity,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 || len == 0 {
            return Err(Error::Config("graph needs >= 1 layer, head and position".into()));
        }
        if mask >= len {
            return Err(Error::Input(format!("mask {mask} outside length {len}")));
        }
        let mut nodes = Vec::new();
        for pos in 0..len {
            nodes.push(NodeId::Input { pos });
        }
        for layer in 1..=layers {
            if granularity == Granularity::Attention {
                for pos in 0..len {
                    for head in 0..heads {
                        nodes.push(NodeId::Head { layer, head, pos });
                    }
                    nodes.push(NodeId::Skip { layer, pos });
                }
            }
            for pos in 0..len {
                nodes.push(NodeId::Layer { layer, pos });
            }
        }
        nodes.push(NodeId::Qoi);
        let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut succ = vec![Vec::new(); nodes.len()];
        let mut pred = vec![Vec::new(); nodes.len()];
        let mut edge = |a: NodeId, b: NodeId| {
            let (ia, ib) = (index[&a], index[&b]);
            succ[ia].push(ib);
            pred[ib].push(ia);
        };
        for layer in 1..=layers {
            for i in 0..len {
                let from = NodeId::embedding(layer - 1, i);
                for j in 0..len {
                    let to = NodeId::embedding(layer, j);
                    match granularity {
                        Granularity::Embedding => edge(from, to),
                        Granularity::Attention => {
                            for head in 0..heads {
                                edge(from, NodeId::Head { layer, head, pos: j });
                            }
                        }
                    }
                }
            }
            if granularity == Granularity::Attention {
                for j in 0..len {
                    let to = NodeId::embedding(layer, j);
                    for head in 0..heads {
                        edge(NodeId::Head { layer, head, pos: j }, to);
                    }
                    edge(NodeId::embedding(layer - 1, j), NodeId::Skip { layer, pos: j });
                    edge(NodeId::Skip { layer, pos: j }, to);
                }
            }
        }
        edge(NodeId::embedding(layers, mask), NodeId::Qoi);
        Ok(Self {
            granularity,
            layers,
            heads,
            len,
            mask,
            nodes,
            index,
            succ,
            pred,
        })
    }

    /// Nodes in topological order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn contains(&self, n: &NodeId) -> bool {
        self.index.contains_key(n)
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }

    pub fn successors(&self, n: &NodeId) -> Vec<NodeId> {
        self.index
            .get(n)
            .map(|&i| self.succ[i].iter().map(|&j| self.nodes[j]).collect())
            .unwrap_or_default()
    }

    pub fn predecessors(&self, n: &NodeId) -> Vec<NodeId> {
        self.index
            .get(n)
            .map(|&i| self.pred[i].iter().map(|&j| self.nodes[j]).collect())
            .unwrap_or_default()
    }

    pub fn has_edge(&self, a: &NodeId, b: &NodeId) -> bool {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&i), Some(&j)) => self.succ[i].contains(&j),
            _ => false,
        }
    }

    fn idx(&self, n: &NodeId) -> Result<usize> {
        self.index
            .get(n)
            .copied()
            .ok_or_else(|| Error::UnknownNode(n.to_string()))
    }

    /// Exact number of directed paths `from -> to` (0 when disconnected).
    pub fn count_paths(&self, from: &NodeId, to: &NodeId) -> Result<BigUint> {
        let (s, t) = (self.idx(from)?, self.idx(to)?);
        if s == t {
            return Ok(BigUint::one());
        }
        if s > t {
            return Ok(BigUint::zero());
        }
        let mut ways: Vec<BigUint> = vec![BigUint::zero(); t - s + 1];
        ways[0] = BigUint::one();
        for k in s..t {
            if ways[k - s].is_zero() {
                continue;
            }
            let w = ways[k - s].clone();
            for &nx in &self.succ[k] {
                if nx <= t {
                    ways[nx - s] += &w;
                }
            }
        }
        Ok(std::mem::take(&mut ways[t - s]))
    }

    pub fn reachable(&self, from: &NodeId, to: &NodeId) -> Result<bool> {
        Ok(!self.count_paths(from, to)?.is_zero())
    }

    /// Checks the pattern conditions: starts at an input, ends at qoi, each
    /// consecutive pair joined by at least one path.
    pub fn validate_pattern(&self, nodes: &[NodeId]) -> Result<()> {
        match (nodes.first(), nodes.last()) {
            (Some(NodeId::Input { .. }), Some(NodeId::Qoi)) if nodes.len() >= 2 => {}
            _ => {
                return Err(Error::Pattern(
                    "pattern must start at an input node and end at qoi".into(),
                ))
            }
        }
        for w in nodes.windows(2) {
            if !self.reachable(&w[0], &w[1])? {
                return Err(Error::Pattern(format!("no path from {} to {}", w[0], w[1])));
            }
        }
        Ok(())
    }

    /// `|γ(π)|`: product of the segment path counts.
    pub fn count_abstracted(&self, nodes: &[NodeId]) -> Result<BigUint> {
        self.validate_pattern(nodes)?;
        let mut total = BigUint::one();
        for w in nodes.windows(2) {
            total *= self.count_paths(&w[0], &w[1])?;
        }
        Ok(total)
    }

    /// Every concrete path abstracted by `nodes`, or an error past `limit`.
    pub fn enumerate_abstracted(&self, nodes: &[NodeId], limit: u64) -> Result<Vec<Vec<NodeId>>> {
        let count = self.count_abstracted(nodes)?;
        if count > BigUint::from(limit) {
            return Err(Error::Bound {
                count: count.to_string(),
                limit,
            });
        }
        let mut acc: Vec<Vec<NodeId>> = vec![vec![nodes[0]]];
        for w in nodes.windows(2) {
            let segs = self.paths_between(&w[0], &w[1]);
            let mut next = Vec::with_capacity(acc.len() * segs.len());
            for prefix in &acc {
                for seg in &segs {
                    let mut p = prefix.clone();
                    p.extend_from_slice(&seg[1..]);
                    next.push(p);
                }
            }
            acc = next;
        }
        Ok(acc)
    }

    /// All paths between two nodes by depth-first search.
    pub fn paths_between(&self, from: &NodeId, to: &NodeId) -> Vec<Vec<NodeId>> {
        let (Ok(s), Ok(t)) = (self.idx(from), self.idx(to)) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut stack = vec![s];
        self.dfs(s, t, &mut stack, &mut out);
        out
    }

    fn dfs(&self, at: usize, target: usize, stack: &mut Vec<usize>, out: &mut Vec<Vec<NodeId>>) {
        if at == target {
            out.push(stack.iter().map(|&i| self.nodes[i]).collect());
            return;
        }
        for &nx in &self.succ[at] {
            if nx <= target {
                stack.push(nx);
                self.dfs(nx, target, stack, out);
                stack.pop();
            }
        }
    }
}
