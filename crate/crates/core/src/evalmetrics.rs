//! Node ablation, ablated accuracy, concentration, path share, alignment rate
//! and pattern entropy.

use std::collections::{BTreeMap, HashSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::AttentionTensorStack;
use crate::corpus::{credit, Instance};
use crate::error::{Error, Result};
use crate::graph::{GraphView, Granularity, Pattern, PatternCollection, Sign};
use crate::influence::Attributions;
use crate::numerics::Tensor;
use crate::transformer::{qoi_score, ForwardOptions, Intervention, ModelConfig, NodeId, ToyTransformer};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Nodes kept during an ablated forward pass. Inputs and qoi are always kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainedSet {
    pub granularity: Granularity,
    pub nodes: HashSet<NodeId>,
}

impl RetainedSet {
    pub fn new(granularity: Granularity, nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            granularity,
            nodes: nodes.into_iter().collect(),
        }
    }

    pub fn from_patterns<'a>(granularity: Granularity, patterns: impl IntoIterator<Item = &'a Pattern>) -> Self {
        Self::new(granularity, patterns.into_iter().flat_map(|p| p.nodes.iter().copied()))
    }

    /// Every node of the model.
    pub fn full(granularity: Granularity, config: &ModelConfig, len: usize) -> Self {
        let mut nodes = Vec::new();
        for l in 1..=config.layers {
            for pos in 0..len {
                nodes.push(NodeId::Layer { layer: l, pos });
                nodes.push(NodeId::Skip { layer: l, pos });
                for head in 0..config.heads {
                    nodes.push(NodeId::Head { layer: l, head, pos });
                }
            }
        }
        Self::new(granularity, nodes)
    }

    pub fn contains(&self, n: &NodeId) -> bool {
        matches!(n, NodeId::Input { .. } | NodeId::Qoi) || self.nodes.contains(n)
    }

    /// Zeroing plan for every non-retained node of this granularity.
    pub fn intervention(&self, config: &ModelConfig, len: usize) -> Intervention {
        let mut iv = Intervention::new();
        let (h, dh) = (config.hidden, config.head_dim());
        for layer in 1..=config.layers {
            for pos in 0..len {
                match self.granularity {
                    Granularity::Embedding => {
                        let n = NodeId::Layer { layer, pos };
                        if !self.contains(&n) {
                            iv.zero(n, h);
                        }
                    }
                    Granularity::Attention => {
                        for head in 0..config.heads {
                            let n = NodeId::Head { layer, head, pos };
                            if !self.contains(&n) {
                                iv.zero(n, dh);
                            }
                        }
                        let s = NodeId::Skip { layer, pos };
                        if !self.contains(&s) {
                            iv.zero(s, h);
                        }
                    }
                }
            }
        }
        iv
    }
}

/// Logits with every non-retained node replaced by zeros.
pub fn ablate_forward(model: &ToyTransformer, ids: &[usize], retained: &RetainedSet) -> Result<Tensor> {
    let iv = retained.intervention(&model.config, ids.len());
    let trace = model.forward(
        ids,
        &ForwardOptions {
            intervention: Some(&iv),
            eager: true,
            ..Default::default()
        },
    )?;
    Ok(trace.logits().clone())
}

/// Mean credit (ties count half) of the ablated model, one retained set per
/// instance.
pub fn ablated_accuracy(model: &ToyTransformer, instances: &[Instance], retained: &[RetainedSet]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Input("ablated accuracy needs at least one instance".into()));
    }
    if instances.len() != retained.len() {
        return Err(Error::Input("one retained set per instance required".into()));
    }
    let scores = instances
        .par_iter()
        .zip(retained)
        .map(|(inst, r)| {
            let logits = ablate_forward(model, &inst.ids, r)?;
            Ok(credit(qoi_score(&logits, inst.mask_pos, inst.correct, inst.wrong)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Numerators and denominators of positive and negative concentration for
/// one instance: `(Σ I(Π+), Σ attr>0, Σ -I(Π-), Σ -attr<0)`.
pub fn concentration_parts(collection: &PatternCollection, attributions: &Attributions) -> [f64; 4] {
    let mut parts = [0.0; 4];
    for p in &collection.patterns {
        match p.sign_tag {
            Sign::Positive => parts[0] += p.influence,
            Sign::Negative => parts[2] -= p.influence,
        }
    }
    for w in &attributions.words {
        if w.attribution > 0.0 {
            parts[1] += w.attribution;
        } else if w.attribution < 0.0 {
            parts[3] -= w.attribution;
        }
    }
    parts
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

/// `(pos, neg)` concentration; `None` where the denominator vanishes.
pub fn concentration(collection: &PatternCollection, attributions: &Attributions) -> (Option<f64>, Option<f64>) {
    let p = concentration_parts(collection, attributions);
    (ratio(p[0], p[1]), ratio(p[2], p[3]))
}

/// Pooled concentration over instances (sums of numerators over sums of
/// denominators).
pub fn pooled_concentration(parts: &[[f64; 4]]) -> (Option<f64>, Option<f64>) {
    let mut s = [0.0; 4];
    for p in parts {
        for (a, b) in s.iter_mut().zip(p) {
            *a += b;
        }
    }
    (ratio(s[0], s[1]), ratio(s[2], s[3]))
}

/// Exact `(Σ |γ(π_i)|, Σ |paths(x_i -> qoi)|)` for one collection.
pub fn path_share_parts(view: &GraphView, collection: &PatternCollection) -> Result<(BigInt, BigInt)> {
    let mut num = BigInt::zero();
    let mut den = BigInt::zero();
    for p in &collection.patterns {
        num += BigInt::from(view.count_abstracted(&p.nodes)?);
        den += BigInt::from(view.count_paths(&NodeId::Input { pos: p.word_index }, &NodeId::Qoi)?);
    }
    Ok((num, den))
}

pub fn path_share(view: &GraphView, collection: &PatternCollection) -> Result<BigRational> {
    let (n, d) = path_share_parts(view, collection)?;
    if d.is_zero() {
        return Err(Error::Pattern("path share of an empty collection".into()));
    }
    Ok(BigRational::new(n, d))
}

/// For every head node in the patterns: whether its head carries the largest
/// attention weight from the preceding position.
pub fn alignment_hits(collection: &PatternCollection, stack: &AttentionTensorStack) -> Vec<bool> {
    let mut hits = Vec::new();
    for p in &collection.patterns {
        for w in p.nodes.windows(2) {
            if let (Some(i), NodeId::Head { layer, head, pos }) = (w[0].pos(), w[1]) {
                hits.push(stack.argmax_head(layer, i, pos) == head);
            }
        }
    }
    hits
}

pub fn alignment_rate(hits: &[bool]) -> Option<f64> {
    (!hits.is_empty()).then(|| hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Percentile bootstrap interval of the hit rate.
pub fn bootstrap_interval(hits: &[bool], resamples: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    if hits.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = hits.len();
    let mut rates: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| hits[rng.random_range(0..n)]).count() as f64 / n as f64)
        .collect();
    rates.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| rates[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some((at(tail), at(1.0 - tail)))
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
    }
}

/// Mean over `universe` of the binary entropy (bits) of each node's
/// membership frequency across the `K` node sets.
pub fn pattern_entropy(sets: &[Vec<NodeId>], universe: &[NodeId]) -> Result<f64> {
    if sets.is_empty() || universe.is_empty() {
        return Err(Error::Input("pattern entropy needs at least one pattern and node".into()));
    }
    let index: HashSet<&NodeId> = universe.iter().collect();
    let mut freq: BTreeMap<NodeId, usize> = BTreeMap::new();
    for s in sets {
        let uniq: HashSet<&NodeId> = s.iter().collect();
        for n in uniq {
            if !index.contains(n) {
                return Err(Error::Pattern(format!(
                    "node {n} outside the graph; instances must share one length"
                )));
            }
            *freq.entry(*n).or_default() += 1;
        }
    }
    let k = sets.len() as f64;
    let total: f64 = freq.values().map(|&c| binary_entropy(c as f64 / k)).sum();
    Ok(total / universe.len() as f64)
}

pub fn pattern_entropy_in(view: &GraphView, sets: &[Vec<NodeId>]) -> Result<f64> {
    pattern_entropy(sets, view.nodes())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub method: String,
    pub granularity: Granularity,
    pub n_instances: usize,
    pub original_accuracy: f64,
    pub ablated_accuracy: f64,
    /// Ablated accuracy with every skip swapped for its heads.
    pub repl_skip_accuracy: Option<f64>,
    pub concentration_pos: Option<f64>,
    pub concentration_neg: Option<f64>,
    /// Exact ratio as `numerator/denominator`.
    pub path_share: String,
    pub path_share_value: f64,
    pub alignment_rate: Option<f64>,
    pub alignment_ci95: Option<(f64, f64)>,
    pub pattern_entropy: f64,
    /// Fraction of intra-layer nodes in positive patterns that are skips.
    pub skip_fraction: Option<f64>,
}

pub fn rational_string(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

pub fn rational_value(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Share of skip nodes among intra-layer nodes of the positive patterns.
pub fn skip_fraction<'a>(collections: impl IntoIterator<Item = &'a PatternCollection>) -> Option<f64> {
    let (mut skips, mut total) = (0usize, 0usize);
    for c in collections {
        for p in c.positive() {
            for n in &p.nodes {
                match n {
                    NodeId::Skip { .. } => {
                        skips += 1;
                        total += 1;
                    }
                    NodeId::Head { .. } => total += 1,
                    _ => {}
                }
            }
        }
    }
    (total > 0).then(|| skips as f64 / total as f64)
}

/// Everything the report needs about one traced instance.
#[derive(Debug, Clone)]
pub struct TracedInstance {
    pub instance: Instance,
    pub collection: PatternCollection,
    pub attributions: Attributions,
    pub stack: Option<AttentionTensorStack>,
}

/// Builds a report row for one method over traced instances sharing a length.
pub fn build_report(
    model: &ToyTransformer,
    method: &str,
    traced: &[TracedInstance],
    bootstrap_seed: u64,
) -> Result<MetricsReport> {
    let first = traced
        .first()
        .ok_or_else(|| Error::Input("no traced instances".into()))?;
    let granularity = first.collection.granularity;
    let len = first.instance.ids.len();
    if traced
        .iter()
        .any(|t| t.instance.ids.len() != len || t.collection.granularity != granularity)
    {
        return Err(Error::Input("instances must share one length and granularity".into()));
    }
    let instances: Vec<Instance> = traced.iter().map(|t| t.instance.clone()).collect();
    let cfg = &model.config;
    let full: Vec<RetainedSet> = traced.iter().map(|_| RetainedSet::full(granularity, cfg, len)).collect();
    let original_accuracy = ablated_accuracy(model, &instances, &full)?;
    let kept: Vec<RetainedSet> = traced
        .iter()
        .map(|t| RetainedSet::from_patterns(granularity, t.collection.positive()))
        .collect();
    let ablated = ablated_accuracy(model, &instances, &kept)?;
    let repl_skip_accuracy = if granularity == Granularity::Attention {
        let sets = traced
            .iter()
            .map(|t| {
                let mut nodes = Vec::new();
                for p in t.collection.positive() {
                    nodes.extend(crate::baselines::pattern_replace_skip(p, cfg.heads)?);
                }
                Ok(RetainedSet::new(granularity, nodes))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(ablated_accuracy(model, &instances, &sets)?)
    } else {
        None
    };
    let parts: Vec<[f64; 4]> = traced
        .iter()
        .map(|t| concentration_parts(&t.collection, &t.attributions))
        .collect();
    let (concentration_pos, concentration_neg) = pooled_concentration(&parts);

    let view = GraphView::build(cfg, len, first.instance.mask_pos, granularity)?;
    let (mut num, mut den) = (BigInt::zero(), BigInt::zero());
    for t in traced {
        if t.instance.mask_pos != first.instance.mask_pos {
            return Err(Error::Input("instances must share the mask position".into()));
        }
        let (n, d) = path_share_parts(&view, &t.collection)?;
        num += n;
        den += d;
    }
    let share = if den.is_zero() {
        BigRational::zero()
    } else {
        BigRational::new(num, den)
    };

    let (alignment_rate_v, alignment_ci95) = if granularity == Granularity::Attention {
        let mut hits = Vec::new();
        for t in traced {
            if let Some(s) = &t.stack {
                hits.extend(alignment_hits(&t.collection, s));
            }
        }
        (alignment_rate(&hits), bootstrap_interval(&hits, 1000, 0.95, bootstrap_seed))
    } else {
        (None, None)
    };

    // entropy per template position, averaged over positions
    let mut by_word: BTreeMap<usize, Vec<Vec<NodeId>>> = BTreeMap::new();
    for t in traced {
        for p in &t.collection.patterns {
            by_word.entry(p.word_index).or_default().push(p.nodes.clone());
        }
    }
    let mut ent = 0.0;
    for sets in by_word.values() {
        ent += pattern_entropy_in(&view, sets)?;
    }
    let pattern_entropy = if by_word.is_empty() { 0.0 } else { ent / by_word.len() as f64 };

    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        method: method.to_string(),
        granularity,
        n_instances: traced.len(),
        original_accuracy,
        ablated_accuracy: ablated,
        repl_skip_accuracy,
        concentration_pos,
        concentration_neg,
        path_share: rational_string(&share),
        path_share_value: rational_value(&share),
        alignment_rate: alignment_rate_v,
        alignment_ci95,
        pattern_entropy,
        skip_fraction: if granularity == Granularity::Attention {
            skip_fraction(traced.iter().map(|t| &t.collection))
        } else {
            None
        },
    })
}

/// Per template position: `(position, entropy, mean |attribution|)`.
pub fn entropy_vs_attribution(view: &GraphView, traced: &[TracedInstance]) -> Result<Vec<(usize, f64, f64)>> {
    let mut sets: BTreeMap<usize, Vec<Vec<NodeId>>> = BTreeMap::new();
    let mut mags: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in traced {
        for p in &t.collection.patterns {
            sets.entry(p.word_index).or_default().push(p.nodes.clone());
            mags.entry(p.word_index).or_default().push(p.attribution.abs());
        }
    }
    sets.iter()
        .map(|(pos, s)| {
            let m = &mags[pos];
            Ok((*pos, pattern_entropy_in(view, s)?, m.iter().sum::<f64>() / m.len() as f64))
        })
        .collect()
}
