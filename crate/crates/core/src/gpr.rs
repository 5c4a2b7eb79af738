//! Guided pattern refinement: greedy layer-by-layer node insertion.

use crate::error::{Error, Result};
use crate::graph::{Granularity, Pattern, PatternCollection, Sign};
use crate::influence::Tracer;
use crate::transformer::NodeId;

/// Candidate nodes for the intra-layer step between `h^{layer-1}_from` and
/// `h^layer_to`: heads in index order, then the skip when positions match.
pub fn intra_candidates(layer: usize, heads: usize, from: usize, to: usize) -> Vec<NodeId> {
    let mut c: Vec<NodeId> = (0..heads)
        .map(|head| NodeId::Head { layer, head, pos: to })
        .collect();
    if from == to {
        c.push(NodeId::Skip { layer, pos: to });
    }
    c
}

/// Inserts `node` keeping the pattern sorted in data-flow order.
pub fn insert_node(nodes: &[NodeId], node: NodeId) -> Vec<NodeId> {
    let mut out = nodes.to_vec();
    let at = out
        .iter()
        .position(|n| n.topo_key() > node.topo_key())
        .unwrap_or(out.len());
    out.insert(at, node);
    out
}

/// Picks the candidate maximising `sign * influence`; the first candidate
/// wins ties. Returns the extended pattern and its influence.
pub fn best_insertion(
    tracer: &mut Tracer<'_>,
    base: &[NodeId],
    candidates: &[NodeId],
    sign: Sign,
) -> Result<(Vec<NodeId>, f64)> {
    let mut best: Option<(Vec<NodeId>, f64)> = None;
    for &c in candidates {
        let nodes = insert_node(base, c);
        let infl = tracer.pattern_influence(&nodes)?;
        let better = match &best {
            None => true,
            Some((_, b)) => sign.factor() * infl > sign.factor() * b,
        };
        if better {
            best = Some((nodes, infl));
        }
    }
    best.ok_or_else(|| Error::Pattern("empty guiding set".into()))
}

/// Embedding-level refinement of `[x_word, qoi]`. Layers `1..L` pick among
/// `positions`; the last layer is fixed to the qoi position.
pub fn gpr_embedding(
    tracer: &mut Tracer<'_>,
    word: usize,
    attribution: f64,
    positions: &[usize],
) -> Result<Pattern> {
    let layers = tracer.model().config.layers;
    let mask = tracer.query().qoi.position;
    let sign = Sign::of(attribution);
    let mut nodes = vec![
        NodeId::Input { pos: word },
        NodeId::Layer { layer: layers, pos: mask },
        NodeId::Qoi,
    ];
    let mut influence = tracer.pattern_influence(&nodes)?;
    for layer in 1..layers {
        let cands: Vec<NodeId> = positions.iter().map(|&pos| NodeId::Layer { layer, pos }).collect();
        (nodes, influence) = best_insertion(tracer, &nodes, &cands, sign)?;
    }
    Ok(Pattern {
        nodes,
        influence,
        word_index: word,
        sign_tag: sign,
        attribution,
    })
}

/// Head/skip refinement of an embedding-level pattern, one layer at a time
/// from the input upwards.
pub fn gpr_attention(tracer: &mut Tracer<'_>, embedding: &Pattern) -> Result<Pattern> {
    let heads = tracer.model().config.heads;
    let emb = embedding.embedding_nodes();
    check_embedding_shape(&emb, tracer.model().config.layers)?;
    let mut nodes = embedding.nodes.clone();
    let mut influence = embedding.influence;
    for w in emb.windows(2) {
        let (from, to) = (w[0], w[1]);
        let layer = to.layer();
        let cands = intra_candidates(layer, heads, pos_of(&from)?, pos_of(&to)?);
        (nodes, influence) = best_insertion(tracer, &nodes, &cands, embedding.sign_tag)?;
    }
    Ok(Pattern {
        nodes,
        influence,
        ..embedding.clone()
    })
}

fn pos_of(n: &NodeId) -> Result<usize> {
    n.pos().ok_or_else(|| Error::Pattern(format!("{n} has no position")))
}

/// One embedding node per layer `0..=L`, no intra-layer nodes.
pub fn check_embedding_shape(emb: &[NodeId], layers: usize) -> Result<()> {
    let ok = emb.len() == layers + 1 && emb.iter().enumerate().all(|(l, n)| n.layer() == l);
    if ok {
        Ok(())
    } else {
        Err(Error::Pattern(
            "expected one embedding node per layer from the input to the last block".into(),
        ))
    }
}

/// Refined patterns for every traced word of the tracer's query.
pub fn trace_sentence(
    tracer: &mut Tracer<'_>,
    granularity: Granularity,
    positions: &[usize],
) -> Result<PatternCollection> {
    let attr = tracer.attributions()?;
    let mut out = PatternCollection::new(granularity);
    for w in &attr.words {
        let mut p = gpr_embedding(tracer, w.position, w.attribution, positions)?;
        if granularity == Granularity::Attention {
            p = gpr_attention(tracer, &p)?;
        }
        out.patterns.push(p);
    }
    Ok(out)
}
