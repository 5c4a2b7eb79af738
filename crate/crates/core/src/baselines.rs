//! Comparison pattern extractors: random, attention max-product, conductance
//! and internal influence, plus the skip-replacement counterfactual.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::{check_embedding_shape, insert_node, intra_candidates};
use crate::graph::{Granularity, Pattern, Sign};
use crate::influence::Tracer;
use crate::numerics::Tensor;
use crate::transformer::{NodeId, Trace};

/// Attention probabilities per layer and head, indexed `[source, target]`,
/// so that every column sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensorStack {
    /// `layers[l - 1][head]` is `[N, N]`.
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionTensorStack {
    /// Reads the stack from a taped forward (use the un-interpolated input).
    pub fn from_trace(trace: &Trace) -> Self {
        let layers = trace
            .attention
            .iter()
            .enumerate()
            .map(|(l, heads)| {
                (0..heads.len())
                    .map(|k| trace.attention_probs(l + 1, k).transpose())
                    .collect()
            })
            .collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.first().and_then(|h| h.first()).map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `M_layer[head, i, j]`.
    pub fn weight(&self, layer: usize, head: usize, i: usize, j: usize) -> f64 {
        self.layers[layer - 1][head].at(i, j)
    }

    /// Mean over heads for `layer`.
    pub fn averaged(&self, layer: usize) -> Tensor {
        let heads = &self.layers[layer - 1];
        let mut acc = Tensor::zeros(heads[0].shape());
        for h in heads {
            acc.add_assign(h);
        }
        acc.scaled(1.0 / heads.len() as f64)
    }

    /// `0.5 I + 0.5 mean`, modelling the residual connection.
    pub fn rollout(&self, layer: usize) -> Tensor {
        let mut m = self.averaged(layer).scaled(0.5);
        for i in 0..m.rows() {
            let cols = m.cols();
            m.data_mut()[i * cols + i] += 0.5;
        }
        m
    }

    /// Largest column-sum error over all heads.
    pub fn column_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for heads in &self.layers {
            for m in heads {
                for j in 0..m.cols() {
                    let s: f64 = (0..m.rows()).map(|i| m.at(i, j)).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
        worst
    }

    /// Head with the largest weight on `i -> j`; lowest index on ties.
    pub fn argmax_head(&self, layer: usize, i: usize, j: usize) -> usize {
        let heads = &self.layers[layer - 1];
        let mut best = 0;
        for k in 1..heads.len() {
            if heads[k].at(i, j) > heads[best].at(i, j) {
                best = k;
            }
        }
        best
    }
}

/// Same-shape random pattern: one uniformly drawn node per guiding set.
pub fn pattern_random<R: Rng + ?Sized>(
    reference: &Pattern,
    granularity: Granularity,
    layers: usize,
    heads: usize,
    positions: &[usize],
    rng: &mut R,
) -> Result<Pattern> {
    let emb = reference.embedding_nodes();
    check_embedding_shape(&emb, layers)?;
    let mut nodes = vec![emb[0]];
    for e in &emb[1..layers] {
        let pos = *positions
            .choose(rng)
            .ok_or_else(|| Error::Pattern("empty guiding set".into()))?;
        nodes.push(NodeId::Layer { layer: e.layer(), pos });
    }
    nodes.push(emb[layers]);
    if granularity == Granularity::Attention {
        let mut refined = nodes.clone();
        for w in nodes.windows(2) {
            let (a, b) = (w[0].pos().unwrap_or(0), w[1].pos().unwrap_or(0));
            let cands = intra_candidates(w[1].layer(), heads, a, b);
            let pick = *cands.choose(rng).expect("at least one head");
            refined = insert_node(&refined, pick);
        }
        nodes = refined;
    }
    nodes.push(NodeId::Qoi);
    Ok(Pattern {
        nodes,
        influence: 0.0,
        ..reference.clone()
    })
}

fn dp_matrix(stack: &AttentionTensorStack, layer: usize, rollout: bool) -> Tensor {
    if rollout {
        stack.rollout(layer)
    } else {
        stack.averaged(layer)
    }
}

/// Product of the chosen matrix entries along `x_source -> h^1_{p1} -> ... ->
/// h^L_mask`, multiplied in layer order.
pub fn attention_path_product(
    stack: &AttentionTensorStack,
    source: usize,
    inner: &[usize],
    mask: usize,
    rollout: bool,
) -> f64 {
    let mut prev = source;
    let mut v = 1.0;
    for (l, &p) in inner.iter().chain(std::iter::once(&mask)).enumerate() {
        v *= dp_matrix(stack, l + 1, rollout).at(prev, p);
        prev = p;
    }
    v
}

/// Embedding-level pattern maximising the product of averaged (or rollout)
/// attention weights. The last hop is fixed to the mask position; ties go to
/// the lexicographically smallest position sequence.
pub fn pattern_attention_dp(
    stack: &AttentionTensorStack,
    source: usize,
    mask: usize,
    rollout: bool,
) -> Result<Pattern> {
    let depth = stack.depth();
    let n = stack.len();
    if depth == 0 || source >= n || mask >= n {
        return Err(Error::Input("attention stack does not cover the query".into()));
    }
    // best[j] = (product, prefix) for paths ending at position j of the layer.
    let mut best: Vec<(f64, Vec<usize>)> = vec![(1.0, Vec::new()); 1];
    let mut ends: Vec<usize> = vec![source];
    for layer in 1..=depth {
        let m = dp_matrix(stack, layer, rollout);
        let targets: Vec<usize> = if layer == depth { vec![mask] } else { (0..n).collect() };
        let mut next = Vec::with_capacity(targets.len());
        for &j in &targets {
            let mut cur: Option<(f64, Vec<usize>)> = None;
            for (e, (v, prefix)) in ends.iter().zip(&best) {
                let cand = v * m.at(*e, j);
                let take = match &cur {
                    None => true,
                    Some((bv, bp)) => cand > *bv || (cand == *bv && prefix < bp),
                };
                if take {
                    cur = Some((cand, prefix.clone()));
                }
            }
            let (v, mut prefix) = cur.expect("non-empty layer");
            prefix.push(j);
            next.push((v, prefix));
        }
        best = next;
        ends = targets;
    }
    let (v, mut path) = best.into_iter().next().expect("mask entry");
    if v == 0.0 {
        // every path ties at zero, so the lexicographically first one wins;
        // the per-prefix maxima above cannot see that
        path = vec![0; depth - 1];
        path.push(mask);
    }
    let mut nodes = vec![NodeId::Input { pos: source }];
    for (l, &p) in path.iter().enumerate() {
        nodes.push(NodeId::Layer { layer: l + 1, pos: p });
    }
    nodes.push(NodeId::Qoi);
    Pattern::from_nodes(nodes)
}

/// Conductance of the word through `node`: influence of `[x_word, node, qoi]`.
pub fn conductance_score(tracer: &mut Tracer<'_>, word: usize, node: NodeId) -> Result<f64> {
    tracer.pattern_influence(&[NodeId::Input { pos: word }, node, NodeId::Qoi])
}

/// Coordinate sum of `E[∂q/∂node]`.
pub fn internal_influence_score(tracer: &mut Tracer<'_>, node: NodeId) -> Result<f64> {
    Ok(tracer.suffix_gradient(&[node, NodeId::Qoi])?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeScore {
    Conductance,
    InternalInfluence,
}

fn argmax_by(
    tracer: &mut Tracer<'_>,
    word: usize,
    sign: Sign,
    cands: &[NodeId],
    score: NodeScore,
) -> Result<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for &c in cands {
        let s = sign.factor()
            * match score {
                NodeScore::Conductance => conductance_score(tracer, word, c)?,
                NodeScore::InternalInfluence => internal_influence_score(tracer, c)?,
            };
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::Pattern("empty guiding set".into()))
}

/// Per-guiding-set argmax of a single-node score, each layer independently.
pub fn pattern_by_node_score(
    tracer: &mut Tracer<'_>,
    word: usize,
    attribution: f64,
    positions: &[usize],
    granularity: Granularity,
    score: NodeScore,
) -> Result<Pattern> {
    let layers = tracer.model().config.layers;
    let heads = tracer.model().config.heads;
    let mask = tracer.query().qoi.position;
    let sign = Sign::of(attribution);
    let mut emb = vec![NodeId::Input { pos: word }];
    for layer in 1..layers {
        let cands: Vec<NodeId> = positions.iter().map(|&pos| NodeId::Layer { layer, pos }).collect();
        emb.push(argmax_by(tracer, word, sign, &cands, score)?);
    }
    emb.push(NodeId::Layer { layer: layers, pos: mask });
    let mut nodes = emb.clone();
    if granularity == Granularity::Attention {
        for w in emb.windows(2) {
            let (a, b) = (w[0].pos().unwrap_or(0), w[1].pos().unwrap_or(0));
            let cands = intra_candidates(w[1].layer(), heads, a, b);
            let pick = argmax_by(tracer, word, sign, &cands, score)?;
            nodes = insert_node(&nodes, pick);
        }
    }
    nodes.push(NodeId::Qoi);
    let influence = tracer.pattern_influence(&nodes)?;
    Ok(Pattern {
        nodes,
        influence,
        word_index: word,
        sign_tag: sign,
        attribution,
    })
}

pub fn pattern_conductance(
    tracer: &mut Tracer<'_>,
    word: usize,
    attribution: f64,
    positions: &[usize],
    granularity: Granularity,
) -> Result<Pattern> {
    pattern_by_node_score(tracer, word, attribution, positions, granularity, NodeScore::Conductance)
}

pub fn pattern_internal_influence(
    tracer: &mut Tracer<'_>,
    word: usize,
    attribution: f64,
    positions: &[usize],
    granularity: Granularity,
) -> Result<Pattern> {
    pattern_by_node_score(
        tracer,
        word,
        attribution,
        positions,
        granularity,
        NodeScore::InternalInfluence,
    )
}

/// Node set of an attention-level pattern with every skip swapped for all
/// heads of its layer and position.
pub fn pattern_replace_skip(pattern: &Pattern, heads: usize) -> Result<Vec<NodeId>> {
    if !pattern.nodes.iter().any(NodeId::is_intra_layer) {
        return Err(Error::Pattern("replace_skip needs an attention-level pattern".into()));
    }
    let mut out = Vec::with_capacity(pattern.nodes.len() + heads);
    for n in &pattern.nodes {
        match *n {
            NodeId::Skip { layer, pos } => {
                out.extend((0..heads).map(|head| NodeId::Head { layer, head, pos }));
            }
            other => out.push(other),
        }
    }
    out.sort_by_key(NodeId::topo_key);
    out.dedup();
    Ok(out)
}
