//! Exhaustive pattern search used to audit the greedy refinement.

use crate::error::{Error, Result};
use crate::gpr::{check_embedding_shape, intra_candidates, insert_node};
use crate::graph::{Granularity, Pattern, Sign};
use crate::influence::Tracer;
use crate::transformer::NodeId;

/// Default cap on the number of candidates scored.
pub const MAX_CANDIDATES: u64 = 100_000;

/// Winner of an exhaustive search together with the signed objective
/// `σ·I` of every candidate, in enumeration order.
#[derive(Debug, Clone)]
pub struct Exhaustive {
    pub best: Pattern,
    pub objectives: Vec<f64>,
}

impl Exhaustive {
    /// Fraction of candidates whose objective is strictly below `value`.
    pub fn fraction_below(&self, value: f64) -> f64 {
        let below = self.objectives.iter().filter(|&&o| o < value).count();
        below as f64 / self.objectives.len() as f64
    }
}

fn cartesian(choices: &[Vec<NodeId>], limit: u64) -> Result<Vec<Vec<NodeId>>> {
    let count = choices.iter().try_fold(1u64, |acc, c| acc.checked_mul(c.len() as u64));
    match count {
        Some(c) if c <= limit => {}
        other => {
            return Err(Error::Bound {
                count: other.map_or_else(|| "overflow".into(), |c| c.to_string()),
                limit,
            })
        }
    }
    let mut acc: Vec<Vec<NodeId>> = vec![Vec::new()];
    for set in choices {
        acc = acc
            .iter()
            .flat_map(|prefix| {
                set.iter().map(move |n| {
                    let mut p = prefix.clone();
                    p.push(*n);
                    p
                })
            })
            .collect();
    }
    Ok(acc)
}

fn search(
    tracer: &mut Tracer<'_>,
    base: &[NodeId],
    choices: &[Vec<NodeId>],
    sign: Sign,
    word: usize,
    attribution: f64,
    limit: u64,
) -> Result<Exhaustive> {
    let mut best: Option<(Vec<NodeId>, f64)> = None;
    let mut objectives = Vec::new();
    for combo in cartesian(choices, limit)? {
        let nodes = combo.iter().fold(base.to_vec(), |acc, n| insert_node(&acc, *n));
        let infl = tracer.pattern_influence(&nodes)?;
        let obj = sign.factor() * infl;
        objectives.push(obj);
        if best.as_ref().is_none_or(|(_, b)| obj > sign.factor() * b) {
            best = Some((nodes, infl));
        }
    }
    let (nodes, influence) = best.ok_or_else(|| Error::Pattern("empty guiding set".into()))?;
    Ok(Exhaustive {
        best: Pattern {
            nodes,
            influence,
            word_index: word,
            sign_tag: sign,
            attribution,
        },
        objectives,
    })
}

/// Best embedding pattern over every choice of one position per layer
/// `1..L`; the last layer stays at the qoi position. Ties go to the first
/// candidate in lexicographic order of positions.
pub fn exhaustive_best_embedding(
    tracer: &mut Tracer<'_>,
    word: usize,
    attribution: f64,
    positions: &[usize],
    limit: u64,
) -> Result<Exhaustive> {
    let layers = tracer.model().config.layers;
    let mask = tracer.query().qoi.position;
    let base = [
        NodeId::Input { pos: word },
        NodeId::Layer { layer: layers, pos: mask },
        NodeId::Qoi,
    ];
    let choices: Vec<Vec<NodeId>> = (1..layers)
        .map(|layer| positions.iter().map(|&pos| NodeId::Layer { layer, pos }).collect())
        .collect();
    search(tracer, &base, &choices, Sign::of(attribution), word, attribution, limit)
}

/// Best head/skip assignment for a fixed embedding pattern.
pub fn exhaustive_best_attention(tracer: &mut Tracer<'_>, embedding: &Pattern, limit: u64) -> Result<Exhaustive> {
    let heads = tracer.model().config.heads;
    let emb = embedding.embedding_nodes();
    check_embedding_shape(&emb, tracer.model().config.layers)?;
    let choices: Vec<Vec<NodeId>> = emb
        .windows(2)
        .map(|w| intra_candidates(w[1].layer(), heads, w[0].pos().unwrap_or(0), w[1].pos().unwrap_or(0)))
        .collect();
    search(
        tracer,
        &embedding.nodes,
        &choices,
        embedding.sign_tag,
        embedding.word_index,
        embedding.attribution,
        limit,
    )
}

/// Best pattern over all one-node-per-guiding-set choices. At attention
/// granularity both the embedding positions and the intra-layer nodes vary.
pub fn exhaustive_best_pattern(
    tracer: &mut Tracer<'_>,
    word: usize,
    attribution: f64,
    positions: &[usize],
    granularity: Granularity,
    limit: u64,
) -> Result<Exhaustive> {
    let emb = exhaustive_best_embedding(tracer, word, attribution, positions, limit)?;
    if granularity == Granularity::Embedding {
        return Ok(emb);
    }
    let layers = tracer.model().config.layers;
    let mask = tracer.query().qoi.position;
    let sign = Sign::of(attribution);
    let per_layer: Vec<Vec<NodeId>> = (1..layers)
        .map(|layer| positions.iter().map(|&pos| NodeId::Layer { layer, pos }).collect())
        .collect();
    let mut best: Option<Pattern> = None;
    let mut objectives = Vec::new();
    for combo in cartesian(&per_layer, limit)? {
        let mut nodes = vec![NodeId::Input { pos: word }];
        nodes.extend(combo);
        nodes.push(NodeId::Layer { layer: layers, pos: mask });
        nodes.push(NodeId::Qoi);
        let skeleton = Pattern {
            nodes,
            influence: 0.0,
            word_index: word,
            sign_tag: sign,
            attribution,
        };
        let remaining = limit.saturating_sub(objectives.len() as u64);
        let ex = exhaustive_best_attention(tracer, &skeleton, remaining)?;
        objectives.extend(ex.objectives);
        if best
            .as_ref()
            .is_none_or(|b| sign.factor() * ex.best.influence > sign.factor() * b.influence)
        {
            best = Some(ex.best);
        }
    }
    Ok(Exhaustive {
        best: best.ok_or_else(|| Error::Pattern("empty guiding set".into()))?,
        objectives,
    })
}
