//! Per-edge partial derivatives and brute-force path sums.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{GraphView, Granularity};
use crate::influence::{DoIConfig, Query};
use crate::numerics::{finite_difference_jacobian, Tensor};
use crate::transformer::{interpolate_input, NodeId, ToyTransformer};

use super::reference::{self, dual_jacobian, lift_rows, Dual, Rows, Scalar};

/// Largest number of stored partial entries (f64s).
pub const MAX_PARTIAL_ENTRIES: u64 = 50_000_000;

/// How local Jacobians are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartialMethod {
    /// Exact forward-mode derivatives of the reference encoder.
    Dual,
    /// Central differences on the reference encoder.
    FiniteDifference(f64),
}

/// A sub-function of the encoder with one row as its free argument.
trait Local {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S>;
}

fn local_jacobian<L: Local>(method: PartialMethod, x: &[f64], f: &L) -> Result<Tensor> {
    match method {
        PartialMethod::Dual => Ok(dual_jacobian(|d: &[Dual]| f.eval(d), x)),
        PartialMethod::FiniteDifference(step) => finite_difference_jacobian(|v: &[f64]| f.eval(v), x, step),
    }
}

fn with_row<S: Scalar>(rows: &[Vec<f64>], i: usize, x: &[S]) -> Rows<S> {
    let mut r: Rows<S> = lift_rows(rows);
    r[i] = x.to_vec();
    r
}

/// Every `h^layer` row as a function of row `i` of `h^{layer-1}`.
struct BlockRow<'a> {
    model: &'a ToyTransformer,
    layer: usize,
    prev: &'a [Vec<f64>],
    i: usize,
}

impl Local for BlockRow<'_> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let prev = with_row(self.prev, self.i, x);
        reference::block(self.model, self.layer, &prev).concat()
    }
}

/// Every head output `[head][target]` of `layer` as a function of row `i`
/// of `h^{layer-1}`.
struct HeadsRow<'a> {
    model: &'a ToyTransformer,
    layer: usize,
    prev: &'a [Vec<f64>],
    i: usize,
}

impl Local for HeadsRow<'_> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let prev = with_row(self.prev, self.i, x);
        let input = reference::block_input(self.model, self.layer, &prev);
        reference::heads(self.model, self.layer, &input)
            .into_iter()
            .flat_map(|h| h.into_iter().flatten())
            .collect()
    }
}

/// `h^layer_j` as a function of one head output (`Some(k)`) or the skip row.
struct Combine<'a> {
    model: &'a ToyTransformer,
    layer: usize,
    heads_j: &'a [Vec<f64>],
    skip: &'a [f64],
    head: Option<usize>,
}

impl Local for Combine<'_> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut hs: Rows<S> = lift_rows(self.heads_j);
        let mut skip: Vec<S> = self.skip.iter().map(|&v| S::cst(v)).collect();
        match self.head {
            Some(k) => hs[k] = x.to_vec(),
            None => skip = x.to_vec(),
        }
        reference::combine(self.model, self.layer, &hs, &skip)
    }
}

struct QoiRow<'a> {
    model: &'a ToyTransformer,
    correct: usize,
    wrong: usize,
}

impl Local for QoiRow<'_> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let y = reference::logits_row(self.model, x);
        vec![y[self.correct] - y[self.wrong]]
    }
}

/// Partial derivative `∂head/∂tail` (shape `[dim head, dim tail]`) of every
/// graph edge, each holding the head's other direct inputs fixed.
#[derive(Debug, Clone)]
pub struct EdgePartials {
    pub granularity: Granularity,
    map: HashMap<(NodeId, NodeId), Tensor>,
}

impl EdgePartials {
    pub fn get(&self, tail: &NodeId, head: &NodeId) -> Option<&Tensor> {
        self.map.get(&(*tail, *head))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = &(NodeId, NodeId)> {
        self.map.keys()
    }

    /// Gradient of the qoi with respect to the first node, routed along
    /// exactly this path.
    pub fn path_gradient(&self, path: &[NodeId]) -> Result<Vec<f64>> {
        let mut v = vec![1.0];
        for w in path.windows(2).rev() {
            let j = self
                .get(&w[0], &w[1])
                .ok_or_else(|| Error::Pattern(format!("no edge {} -> {}", w[0], w[1])))?;
            if j.rows() != v.len() {
                return Err(Error::Shape(format!("edge {} -> {}", w[0], w[1])));
            }
            let mut next = vec![0.0; j.cols()];
            for (r, vr) in v.iter().enumerate() {
                for (c, o) in next.iter_mut().enumerate() {
                    *o += vr * j.at(r, c);
                }
            }
            v = next;
        }
        Ok(v)
    }
}

fn check_size(model: &ToyTransformer, len: usize, granularity: Granularity) -> Result<()> {
    let c = &model.config;
    let (l, n, h, a) = (c.layers as u64, len as u64, c.hidden as u64, c.heads as u64);
    let entries = match granularity {
        Granularity::Embedding => l * n * n * h * h,
        Granularity::Attention => l * (n * n * h * h + 2 * n * h * h),
    };
    if entries > MAX_PARTIAL_ENTRIES || a == 0 {
        return Err(Error::Bound {
            count: entries.to_string(),
            limit: MAX_PARTIAL_ENTRIES,
        });
    }
    Ok(())
}

/// Slices rows `[block * width, (block + 1) * width)` out of `jac`.
fn row_block(jac: &Tensor, block: usize, width: usize) -> Tensor {
    let cols = jac.cols();
    let data = jac.data()[block * width * cols..(block + 1) * width * cols].to_vec();
    Tensor::new(vec![width, cols], data).expect("consistent block")
}

/// Edge partials at the (possibly interpolated) embeddings `z`.
pub fn edge_partials(
    model: &ToyTransformer,
    z: &Tensor,
    query: &Query,
    granularity: Granularity,
    method: PartialMethod,
) -> Result<EdgePartials> {
    let c = &model.config;
    let n = z.rows();
    check_size(model, n, granularity)?;
    let (hdim, dh) = (c.hidden, c.head_dim());
    let (hs, _) = reference::forward::<f64>(model, z);
    let mut map = HashMap::new();
    let per_layer = (1..=c.layers)
        .into_par_iter()
        .map(|l| {
            let prev = &hs[l - 1];
            let mut out = Vec::new();
            match granularity {
                Granularity::Embedding => {
                    for i in 0..n {
                        let f = BlockRow { model, layer: l, prev, i };
                        let jac = local_jacobian(method, &prev[i], &f)?;
                        for j in 0..n {
                            out.push(((NodeId::embedding(l - 1, i), NodeId::Layer { layer: l, pos: j }), row_block(&jac, j, hdim)));
                        }
                    }
                }
                Granularity::Attention => {
                    let input = reference::block_input(model, l, prev);
                    let heads = reference::heads(model, l, &input);
                    for i in 0..n {
                        let f = HeadsRow { model, layer: l, prev, i };
                        let jac = local_jacobian(method, &prev[i], &f)?;
                        for k in 0..c.heads {
                            for j in 0..n {
                                out.push((
                                    (NodeId::embedding(l - 1, i), NodeId::Head { layer: l, head: k, pos: j }),
                                    row_block(&jac, k * n + j, dh),
                                ));
                            }
                        }
                        out.push(((NodeId::embedding(l - 1, i), NodeId::Skip { layer: l, pos: i }), Tensor::identity(hdim)));
                    }
                    for j in 0..n {
                        let heads_j: Vec<Vec<f64>> = heads.iter().map(|h| h[j].clone()).collect();
                        let target = NodeId::Layer { layer: l, pos: j };
                        for head in (0..c.heads).map(Some).chain([None]) {
                            let f = Combine {
                                model,
                                layer: l,
                                heads_j: &heads_j,
                                skip: &input[j],
                                head,
                            };
                            let (tail, x) = match head {
                                Some(k) => (NodeId::Head { layer: l, head: k, pos: j }, &heads_j[k]),
                                None => (NodeId::Skip { layer: l, pos: j }, &input[j]),
                            };
                            out.push(((tail, target), local_jacobian(method, x, &f)?));
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    for part in per_layer {
        map.extend(part);
    }
    let top = NodeId::embedding(c.layers, query.qoi.position);
    let f = QoiRow {
        model,
        correct: query.qoi.correct,
        wrong: query.qoi.wrong,
    };
    map.insert((top, NodeId::Qoi), local_jacobian(method, &hs[c.layers][query.qoi.position], &f)?);
    Ok(EdgePartials { granularity, map })
}

/// Brute-force pattern influence: every abstracted path is enumerated and
/// its edge-partial product averaged over the same interpolation samples the
/// influence module uses.
pub struct PathOracle<'m> {
    model: &'m ToyTransformer,
    query: Query,
    view: GraphView,
    input: Tensor,
    samples: Vec<EdgePartials>,
}

/// Default cap on the number of enumerated paths per pattern.
pub const MAX_ENUMERATED_PATHS: u64 = 100_000;

impl<'m> PathOracle<'m> {
    pub fn new(model: &'m ToyTransformer, query: Query, doi: &DoIConfig, granularity: Granularity) -> Result<Self> {
        let view = GraphView::build(&model.config, query.ids.len(), query.qoi.position, granularity)?;
        let input = model.embed(&query.ids)?;
        let samples = doi
            .alphas()?
            .iter()
            .map(|&a| {
                let z = interpolate_input(&input, &query.baseline, &query.traced, a)?;
                edge_partials(model, &z, &query, granularity, PartialMethod::Dual)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            query,
            view,
            input,
            samples,
        })
    }

    pub fn model(&self) -> &'m ToyTransformer {
        self.model
    }

    pub fn view(&self) -> &GraphView {
        &self.view
    }

    pub fn sample(&self, k: usize) -> &EdgePartials {
        &self.samples[k]
    }

    /// Mean over samples of the summed path gradients at the input node.
    pub fn raw_gradient(&self, nodes: &[NodeId]) -> Result<Vec<f64>> {
        let paths = self.view.enumerate_abstracted(nodes, MAX_ENUMERATED_PATHS)?;
        let width = self.input.cols();
        let mut acc = vec![0.0; width];
        for s in &self.samples {
            for p in &paths {
                for (a, g) in acc.iter_mut().zip(s.path_gradient(p)?) {
                    *a += g;
                }
            }
        }
        let k = self.samples.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    }

    /// `(x_i - x_b) · E[Σ_p Π partials]`.
    pub fn pattern_influence(&self, nodes: &[NodeId]) -> Result<f64> {
        let i = match nodes.first() {
            Some(NodeId::Input { pos }) => *pos,
            _ => return Err(Error::Pattern("pattern must start at an input node".into())),
        };
        let g = self.raw_gradient(nodes)?;
        Ok(self
            .input
            .row(i)
            .iter()
            .zip(&self.query.baseline)
            .zip(&g)
            .map(|((x, b), g)| (x - b) * g)
            .sum())
    }
}

pub fn enumerate_path_influence(
    model: &ToyTransformer,
    query: Query,
    nodes: &[NodeId],
    doi: &DoIConfig,
    granularity: Granularity,
) -> Result<f64> {
    PathOracle::new(model, query, doi, granularity)?.pattern_influence(nodes)
}
