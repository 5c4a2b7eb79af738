//! Distributional and pattern influence along the straight line from the
//! baseline input to the actual input.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Sign;
use crate::numerics::{Precision, Tensor};
use crate::transformer::{interpolate_input, ForwardOptions, NodeId, QoiSpec, ToyTransformer, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoIConfig {
    pub n_samples: usize,
    /// Use `k / (n - 1)` instead of the midpoints `(k + 0.5) / n`.
    #[serde(default)]
    pub include_endpoints: bool,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for DoIConfig {
    fn default() -> Self {
        Self {
            n_samples: 50,
            include_endpoints: false,
            precision: Precision::F64,
        }
    }
}

impl DoIConfig {
    pub fn with_samples(n_samples: usize) -> Self {
        Self {
            n_samples,
            ..Self::default()
        }
    }

    pub fn alphas(&self) -> Result<Vec<f64>> {
        let n = self.n_samples;
        if n == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        Ok(if self.include_endpoints {
            if n == 1 {
                vec![1.0]
            } else {
                (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
            }
        } else {
            (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect()
        })
    }
}

/// One sentence with its quantity of interest and baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub ids: Vec<usize>,
    pub qoi: QoiSpec,
    /// `x_b`, substituted at every traced position at `alpha = 0`.
    pub baseline: Vec<f64>,
    /// Positions that move along the interpolation path.
    pub traced: Vec<usize>,
}

impl Query {
    /// Baseline is the embedding of `baseline_token` (the mask token).
    pub fn new(
        model: &ToyTransformer,
        ids: Vec<usize>,
        qoi: QoiSpec,
        baseline_token: usize,
        traced: Vec<usize>,
    ) -> Result<Self> {
        if baseline_token >= model.config.vocab {
            return Err(Error::Input(format!("baseline token {baseline_token} out of range")));
        }
        if let Some(&bad) = traced.iter().find(|&&p| p >= ids.len()) {
            return Err(Error::Input(format!("traced position {bad} out of range")));
        }
        Ok(Self {
            ids,
            qoi,
            baseline: model.embedding_of(baseline_token).to_vec(),
            traced,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAttribution {
    pub position: usize,
    /// Mean over samples of `∂q/∂z_i`.
    pub raw_gradient: Vec<f64>,
    /// `(x_i - x_b) · raw_gradient`.
    pub attribution: f64,
    pub sign: Sign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attributions {
    pub words: Vec<WordAttribution>,
    /// Every traced input equals the baseline, so all scores are zero.
    pub degenerate: bool,
}

impl Attributions {
    pub fn get(&self, position: usize) -> Option<&WordAttribution> {
        self.words.iter().find(|w| w.position == position)
    }
}

type CacheKey = (Vec<NodeId>, usize);

/// Taped forwards at every interpolation sample of one query, plus a cache of
/// adjoints keyed by the pattern suffix they were seeded from. Patterns that
/// share a suffix share its reverse sweeps, and nodes in the same activation
/// share a sweep through that activation.
pub struct Tracer<'m> {
    model: &'m ToyTransformer,
    query: Query,
    alphas: Vec<f64>,
    input: Tensor,
    traces: Vec<Trace>,
    cache: Vec<HashMap<CacheKey, Tensor>>,
}

impl<'m> Tracer<'m> {
    pub fn new(model: &'m ToyTransformer, query: Query, doi: &DoIConfig) -> Result<Self> {
        let alphas = doi.alphas()?;
        if query.qoi.position >= query.ids.len() {
            return Err(Error::Input("mask position outside the sentence".into()));
        }
        let input = model.embed(&query.ids)?;
        let traces = alphas
            .par_iter()
            .map(|&alpha| {
                let z = interpolate_input(&input, &query.baseline, &query.traced, alpha)?;
                model.forward(
                    &query.ids,
                    &ForwardOptions {
                        embeddings: Some(&z),
                        qoi: Some(query.qoi),
                        precision: doi.precision,
                        ..Default::default()
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let cache = vec![HashMap::new(); traces.len()];
        Ok(Self {
            model,
            query,
            alphas,
            input,
            traces,
            cache,
        })
    }

    pub fn model(&self) -> &'m ToyTransformer {
        self.model
    }

    pub fn query(&self) -> &Query {
        &self.query
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn samples(&self) -> usize {
        self.traces.len()
    }

    pub fn trace(&self, k: usize) -> &Trace {
        &self.traces[k]
    }

    /// Uninterpolated word embeddings `x`.
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn clear_cache(&mut self) {
        self.cache.iter_mut().for_each(HashMap::clear);
    }

    /// Adjoint of the whole activation holding `lower`, seeded by the
    /// cotangent that `upper` (a pattern suffix ending at qoi) delivers to
    /// its first node.
    fn adjoint(&mut self, k: usize, upper: &[NodeId], lower: &NodeId) -> Result<&Tensor> {
        let var = self.traces[k].marker(lower)?.var.index();
        let key = (upper.to_vec(), var);
        if !self.cache[k].contains_key(&key) {
            let cot = self.cotangent(k, upper)?;
            let adj = self.traces[k].vjp_rows(&upper[0], lower, &cot)?;
            self.cache[k].insert(key.clone(), adj);
        }
        Ok(&self.cache[k][&key])
    }

    /// Cotangent at `suffix[0]` from the unit seed at qoi, routed only
    /// through the listed nodes.
    fn cotangent(&mut self, k: usize, suffix: &[NodeId]) -> Result<Vec<f64>> {
        match suffix {
            [] => Err(Error::Pattern("empty pattern".into())),
            [NodeId::Qoi] => Ok(vec![1.0]),
            [_] => Err(Error::Pattern("pattern must end at qoi".into())),
            [node, rest @ ..] => {
                let row = self.traces[k].marker(node)?.row;
                let adj = self.adjoint(k, rest, node)?;
                Ok(match row {
                    Some(r) => adj.row(r).to_vec(),
                    None => adj.data().to_vec(),
                })
            }
        }
    }

    fn input_row(nodes: &[NodeId]) -> Result<usize> {
        match (nodes.first(), nodes.last()) {
            (Some(NodeId::Input { pos }), Some(NodeId::Qoi)) => Ok(*pos),
            _ => Err(Error::Pattern(
                "pattern must start at an input node and end at qoi".into(),
            )),
        }
    }

    /// Per-sample gradients at the pattern's input node.
    pub fn pattern_gradients(&mut self, nodes: &[NodeId]) -> Result<Vec<Vec<f64>>> {
        Self::input_row(nodes)?;
        (0..self.traces.len()).map(|k| self.cotangent(k, nodes)).collect()
    }

    /// Mean over samples of the cotangent at `suffix[0]`, routed through the
    /// remaining suffix nodes down from qoi.
    pub fn suffix_gradient(&mut self, suffix: &[NodeId]) -> Result<Vec<f64>> {
        let per = (0..self.traces.len())
            .map(|k| self.cotangent(k, suffix))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_rows(&per))
    }

    /// Mean over samples of the gradient reaching the input through `nodes`.
    pub fn raw_pattern_gradient(&mut self, nodes: &[NodeId]) -> Result<Vec<f64>> {
        let per = self.pattern_gradients(nodes)?;
        Ok(mean_rows(&per))
    }

    /// `(x_i - x_b) · E[g]` for the pattern starting at `x_i`.
    pub fn pattern_influence(&mut self, nodes: &[NodeId]) -> Result<f64> {
        let i = Self::input_row(nodes)?;
        let g = self.raw_pattern_gradient(nodes)?;
        Ok(self.project(i, &g))
    }

    fn project(&self, i: usize, g: &[f64]) -> f64 {
        self.input
            .row(i)
            .iter()
            .zip(&self.query.baseline)
            .zip(g)
            .map(|((x, b), g)| (x - b) * g)
            .sum()
    }

    /// Word-level attributions for every traced position.
    pub fn attributions(&mut self) -> Result<Attributions> {
        let n = self.traces.len();
        let mut sum = Tensor::zeros(self.input.shape());
        for k in 0..n {
            let adj = self.adjoint(k, &[NodeId::Qoi], &NodeId::Input { pos: 0 })?;
            sum.add_assign(adj);
        }
        let mean = sum.scaled(1.0 / n as f64);
        let degenerate = self
            .query
            .traced
            .iter()
            .all(|&i| self.input.row(i) == self.query.baseline.as_slice());
        let words = self
            .query
            .traced
            .iter()
            .map(|&i| {
                let g = mean.row(i).to_vec();
                let attribution = self.project(i, &g);
                WordAttribution {
                    position: i,
                    raw_gradient: g,
                    attribution,
                    sign: Sign::of(attribution),
                }
            })
            .collect();
        Ok(Attributions { words, degenerate })
    }

    /// Dense total Jacobian `∂upper/∂lower` at sample `k`, one basis
    /// cotangent per output coordinate.
    pub fn segment_jacobian_dense(&self, k: usize, upper: &NodeId, lower: &NodeId) -> Result<Tensor> {
        let trace = &self.traces[k];
        let m = trace.value(upper)?.len();
        let n = trace.value(lower)?.len();
        let mut jac = Tensor::zeros(&[m, n]);
        let mut e = vec![0.0; m];
        for r in 0..m {
            e[r] = 1.0;
            let row = trace.vjp(upper, lower, &e)?;
            jac.row_mut(r).copy_from_slice(&row);
            e[r] = 0.0;
        }
        Ok(jac)
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = rows.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

pub fn distributional_influence(
    model: &ToyTransformer,
    query: Query,
    doi: &DoIConfig,
) -> Result<Attributions> {
    Tracer::new(model, query, doi)?.attributions()
}

pub fn pattern_influence(
    model: &ToyTransformer,
    query: Query,
    nodes: &[NodeId],
    doi: &DoIConfig,
) -> Result<f64> {
    Tracer::new(model, query, doi)?.pattern_influence(nodes)
}
