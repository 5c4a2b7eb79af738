//! Post-norm BERT-style masked-LM encoder with every graph node registered on
//! the tape.
//!
//! Block `l` computes, per position `j`,
//!
//! ```text
//! s_j   = copy(in_j)                      in = x + P for l = 1, h^{l-1} otherwise
//! a_k,j = softmax_i(q_k,j · k_k,i / sqrt(dh)) · v_k,i
//! u_j   = LN1(s_j + W_O concat_k(a_k,j) + b_O)
//! h^l_j = LN2(u_j + FFN(u_j))
//! ```
//!
//! so `h^l_j` is a function of `{a_1..A,j, s_j}` only, and every path from
//! `h^{l-1}` into `h^l` passes through exactly one head or the skip.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Marker, Precision, Tape, Tensor, Var};
use crate::transformer::node::NodeId;

pub const CHECKPOINT_FORMAT: &str = "influence-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub ffn_width: usize,
    pub seed: u64,
    #[serde(default)]
    pub tied_output: bool,
    /// Multiplies every random initializer's standard deviation.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

impl ModelConfig {
    /// L=3, A=4, H=32, FFN 64.
    pub fn experiment(vocab: usize, max_len: usize, seed: u64) -> Self {
        Self {
            layers: 3,
            heads: 4,
            hidden: 32,
            max_len,
            vocab,
            ffn_width: 64,
            seed,
            tied_output: false,
            init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("max_len", self.max_len),
            ("vocab", self.vocab),
            ("ffn_width", self.ffn_width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    /// `[V, H]`
    pub token_embedding: Tensor,
    /// `[N_max, H]`
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    /// `[H, V]`; absent when the output projection is tied to `token_embedding`.
    pub output_weight: Option<Tensor>,
    /// `[V]`
    pub output_bias: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ToyTransformer,
}

/// Rows to overwrite at named nodes during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Intervention {
    replace: HashMap<NodeId, Vec<f64>>,
}

impl Intervention {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, node: NodeId, value: Vec<f64>) {
        self.replace.insert(node, value);
    }

    pub fn zero(&mut self, node: NodeId, width: usize) {
        self.replace.insert(node, vec![0.0; width]);
    }

    pub fn get(&self, node: &NodeId) -> Option<&Vec<f64>> {
        self.replace.get(node)
    }

    pub fn is_empty(&self) -> bool {
        self.replace.is_empty()
    }

    pub fn len(&self) -> usize {
        self.replace.len()
    }
}

/// Which scalar to register as the `qoi` node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QoiSpec {
    pub position: usize,
    pub correct: usize,
    pub wrong: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    /// Word embeddings `[N, H]` used in place of the table lookup.
    pub embeddings: Option<&'a Tensor>,
    pub qoi: Option<QoiSpec>,
    pub intervention: Option<&'a Intervention>,
    pub params_require_grad: bool,
    /// Keep only values (no reverse-mode state).
    pub eager: bool,
    pub precision: Precision,
}

/// A recorded forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub tape: Tape,
    pub nodes: HashMap<NodeId, Marker>,
    /// Word embeddings `[N, H]` (the `h^0` rows).
    pub input: Var,
    /// `h^0..=h^L`
    pub embeddings: Vec<Var>,
    /// `heads[l-1][k]`, each `[N, H/A]`.
    pub heads: Vec<Vec<Var>>,
    /// `skips[l-1]`, `[N, H]`.
    pub skips: Vec<Var>,
    /// `attention[l-1][k]`: `[N, N]` probabilities, row = target, column = source.
    pub attention: Vec<Vec<Var>>,
    pub logits: Var,
    pub qoi: Option<Var>,
    /// Parameter leaves in [`ToyTransformer::params`] order.
    pub params: Vec<Var>,
    pub len: usize,
}

impl Trace {
    pub fn marker(&self, node: &NodeId) -> Result<Marker> {
        self.nodes
            .get(node)
            .copied()
            .ok_or_else(|| Error::UnknownNode(node.to_string()))
    }

    pub fn value(&self, node: &NodeId) -> Result<&[f64]> {
        Ok(self.tape.marker_value(self.marker(node)?))
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn qoi_value(&self) -> Option<f64> {
        self.qoi.map(|q| self.tape.value(q).data()[0])
    }

    /// `cotangentᵀ ∂upper/∂lower` over every path between the two nodes.
    pub fn vjp(&self, upper: &NodeId, lower: &NodeId, cotangent: &[f64]) -> Result<Vec<f64>> {
        let u = self.marker(upper)?;
        let l = self.marker(lower)?;
        if u.var <= l.var {
            return Err(Error::NotDownstream {
                upper: upper.to_string(),
                lower: lower.to_string(),
            });
        }
        self.tape.vjp_markers(u, l, cotangent)
    }

    /// Like [`Trace::vjp`] but returns the adjoint of the whole activation
    /// holding `lower_any` (all positions at once).
    pub fn vjp_rows(&self, upper: &NodeId, lower_any: &NodeId, cotangent: &[f64]) -> Result<Tensor> {
        let u = self.marker(upper)?;
        let l = self.marker(lower_any)?;
        self.tape.vjp_to_var(u, cotangent, l.var)
    }

    /// Attention probabilities of block `layer` (1-based), head `head`:
    /// entry `(target, source)`.
    pub fn attention_probs(&self, layer: usize, head: usize) -> &Tensor {
        self.tape.value(self.attention[layer - 1][head])
    }
}

impl ToyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.init_scale;
        let (h, f, v) = (config.hidden, config.ffn_width, config.vocab);
        let mut normal = |shape: &[usize], std: f64| -> Tensor {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std.max(0.0)).expect("std is finite");
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let token_embedding = normal(&[v, h], 0.5 * s);
        let position_embedding = normal(&[config.max_len, h], 0.5 * s);
        let dense = |fan_in: usize| s / (fan_in as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: normal(&[h, h], dense(h)),
                bq: Tensor::zeros(&[h]),
                wk: normal(&[h, h], dense(h)),
                bk: Tensor::zeros(&[h]),
                wv: normal(&[h, h], dense(h)),
                bv: Tensor::zeros(&[h]),
                wo: normal(&[h, h], dense(h)),
                bo: Tensor::zeros(&[h]),
                ln1_gamma: Tensor::full(&[h], 1.0),
                ln1_beta: Tensor::zeros(&[h]),
                w1: normal(&[h, f], dense(h)),
                b1: Tensor::zeros(&[f]),
                w2: normal(&[f, h], dense(f)),
                b2: Tensor::zeros(&[h]),
                ln2_gamma: Tensor::full(&[h], 1.0),
                ln2_beta: Tensor::zeros(&[h]),
            })
            .collect();
        let output_weight = (!config.tied_output).then(|| normal(&[h, v], dense(h)));
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            output_weight,
            output_bias: Tensor::zeros(&[v]),
            config,
        })
    }

    /// Every parameter set to zero, including layer-norm scales.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        if let Some(w) = &self.output_weight {
            out.push(w);
        }
        out.push(&self.output_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        if let Some(w) = &mut self.output_weight {
            out.push(w);
        }
        out.push(&mut self.output_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Word embedding row for `id`.
    pub fn embedding_of(&self, id: usize) -> &[f64] {
        self.token_embedding.row(id)
    }

    /// Word embeddings `[N, H]` for a token sequence.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| self.embedding_of(i).to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab) {
            return Err(Error::Input(format!("unknown token id {bad}")));
        }
        Ok(())
    }

    /// Eager forward returning `[N, V]` logits.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let trace = self.forward(
            ids,
            &ForwardOptions {
                eager: true,
                ..Default::default()
            },
        )?;
        Ok(trace.logits().clone())
    }

    pub fn forward(&self, ids: &[usize], opts: &ForwardOptions<'_>) -> Result<Trace> {
        self.check_ids(ids)?;
        let n = ids.len();
        let cfg = &self.config;
        let (h, dh) = (cfg.hidden, cfg.head_dim());
        if let Some(e) = opts.embeddings {
            if e.shape() != [n, h] {
                return Err(Error::Shape(format!(
                    "embeddings {:?}, expected [{n}, {h}]",
                    e.shape()
                )));
            }
            if !e.is_finite() {
                return Err(Error::Input("non-finite input embeddings".into()));
            }
        }
        if let Some(q) = opts.qoi {
            if q.position >= n || q.correct >= cfg.vocab || q.wrong >= cfg.vocab {
                return Err(Error::Input(format!("qoi spec {q:?} out of range")));
            }
        }

        let mut tape = if opts.eager {
            Tape::eager(opts.precision)
        } else {
            Tape::with_precision(opts.precision)
        };
        let rg = opts.params_require_grad;
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), rg))
            .collect();
        let mut cursor = 2;
        let tok = params[0];
        let pos_table = params[1];

        let mut nodes = HashMap::new();
        let register = |tape: &mut Tape, nodes: &mut HashMap<NodeId, Marker>, var: Var, f: &dyn Fn(usize) -> NodeId| -> Result<()> {
            for j in 0..n {
                let id = f(j);
                tape.mark(id.to_string(), var, Some(j))?;
                nodes.insert(id, Marker { var, row: Some(j) });
            }
            Ok(())
        };
        let intervene = |tape: &mut Tape, var: Var, f: &dyn Fn(usize) -> NodeId| -> Result<Var> {
            let Some(iv) = opts.intervention else {
                return Ok(var);
            };
            let rows: Vec<(usize, Vec<f64>)> = (0..n)
                .filter_map(|j| iv.get(&f(j)).map(|v| (j, v.clone())))
                .collect();
            if rows.is_empty() {
                Ok(var)
            } else {
                tape.replace_rows(var, &rows)
            }
        };

        tape.set_scope("embeddings");
        let x = match opts.embeddings {
            Some(e) => tape.leaf(e.clone(), !opts.eager),
            None => tape.gather(tok, ids)?,
        };
        let x = intervene(&mut tape, x, &|j| NodeId::Input { pos: j })?;
        register(&mut tape, &mut nodes, x, &|j| NodeId::Input { pos: j })?;
        let positions: Vec<usize> = (0..n).collect();
        let p = tape.gather(pos_table, &positions)?;
        let mut inp = tape.add(x, p)?;

        let mut embeddings = vec![x];
        let mut heads_all = Vec::with_capacity(cfg.layers);
        let mut skips = Vec::with_capacity(cfg.layers);
        let mut attention = Vec::with_capacity(cfg.layers);
        let scale = 1.0 / (dh as f64).sqrt();

        for l in 1..=cfg.layers {
            let pv = &params[cursor..cursor + 16];
            cursor += 16;
            let [wq, bq, wk, bk, wv, bv, wo, bo, g1, b1n, w1, b1, w2, b2, g2, b2n] =
                <[Var; 16]>::try_from(pv).expect("16 layer params");

            tape.set_scope(format!("layer {l} attention"));
            let skip = tape.copy(inp)?;
            let skip = intervene(&mut tape, skip, &|j| NodeId::Skip { layer: l, pos: j })?;
            register(&mut tape, &mut nodes, skip, &|j| NodeId::Skip { layer: l, pos: j })?;

            let qm = tape.matmul(inp, wq)?;
            let q = tape.add_bias(qm, bq)?;
            let km = tape.matmul(inp, wk)?;
            let k = tape.add_bias(km, bk)?;
            let vm = tape.matmul(inp, wv)?;
            let v = tape.add_bias(vm, bv)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut probs = Vec::with_capacity(cfg.heads);
            for a in 0..cfg.heads {
                let qa = tape.slice_cols(q, a * dh, dh)?;
                let ka = tape.slice_cols(k, a * dh, dh)?;
                let va = tape.slice_cols(v, a * dh, dh)?;
                let raw = tape.matmul_nt(qa, ka)?;
                let scores = tape.scale(raw, scale)?;
                let pa = tape.softmax_rows(scores)?;
                let head = tape.matmul(pa, va)?;
                let head =
                    intervene(&mut tape, head, &|j| NodeId::Head { layer: l, head: a, pos: j })?;
                register(&mut tape, &mut nodes, head, &|j| NodeId::Head {
                    layer: l,
                    head: a,
                    pos: j,
                })?;
                heads.push(head);
                probs.push(pa);
            }
            let cat = tape.concat_cols(&heads)?;
            let om = tape.matmul(cat, wo)?;
            let att = tape.add_bias(om, bo)?;
            let sum1 = tape.add(skip, att)?;
            let u = tape.layer_norm_rows(sum1, g1, b1n)?;

            tape.set_scope(format!("layer {l} feed-forward"));
            let f1m = tape.matmul(u, w1)?;
            let f1 = tape.add_bias(f1m, b1)?;
            let act = tape.gelu(f1)?;
            let f2m = tape.matmul(act, w2)?;
            let f2 = tape.add_bias(f2m, b2)?;
            let sum2 = tape.add(u, f2)?;
            let out = tape.layer_norm_rows(sum2, g2, b2n)?;
            let out = intervene(&mut tape, out, &|j| NodeId::Layer { layer: l, pos: j })?;
            register(&mut tape, &mut nodes, out, &|j| NodeId::Layer { layer: l, pos: j })?;

            embeddings.push(out);
            heads_all.push(heads);
            skips.push(skip);
            attention.push(probs);
            inp = out;
        }

        tape.set_scope("output");
        let logits = match self.output_weight {
            Some(_) => {
                let w = params[cursor];
                let b = params[cursor + 1];
                let m = tape.matmul(inp, w)?;
                tape.add_bias(m, b)?
            }
            None => {
                let b = params[cursor];
                let m = tape.matmul_nt(inp, tok)?;
                tape.add_bias(m, b)?
            }
        };
        register(&mut tape, &mut nodes, logits, &|j| NodeId::Logits { pos: j })?;
        let qoi = match opts.qoi {
            Some(qs) => {
                let q = tape.logit_diff(logits, qs.position, qs.correct, qs.wrong)?;
                tape.mark(NodeId::Qoi.to_string(), q, None)?;
                nodes.insert(NodeId::Qoi, Marker { var: q, row: None });
                Some(q)
            }
            None => None,
        };

        Ok(Trace {
            tape,
            nodes,
            input: x,
            embeddings,
            heads: heads_all,
            skips,
            attention,
            logits,
            qoi,
            params,
            len: n,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema {
                path: "format".into(),
                msg: format!("expected `{CHECKPOINT_FORMAT}`, got `{}`", ck.format),
            });
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema {
                path: "version".into(),
                msg: format!("expected {CHECKPOINT_VERSION}, got {}", ck.version),
            });
        }
        ck.model.check_shapes()?;
        Ok(ck.model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let bad = |what: &str| Error::Schema {
            path: format!("model.{what}"),
            msg: "shape does not match config".into(),
        };
        let (h, f, v) = (c.hidden, c.ffn_width, c.vocab);
        if self.token_embedding.shape() != [v, h] {
            return Err(bad("token_embedding"));
        }
        if self.position_embedding.shape() != [c.max_len, h] {
            return Err(bad("position_embedding"));
        }
        if self.layers.len() != c.layers {
            return Err(bad("layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let want: [&[usize]; 16] = [
                &[h, h], &[h], &[h, h], &[h], &[h, h], &[h], &[h, h], &[h], &[h], &[h],
                &[h, f], &[f], &[f, h], &[h], &[h], &[h],
            ];
            for (t, s) in l.tensors().iter().zip(want) {
                if t.shape() != s {
                    return Err(bad(&format!("layers[{i}]")));
                }
            }
        }
        match (&self.output_weight, c.tied_output) {
            (Some(w), false) if w.shape() == [h, v] => {}
            (None, true) => {}
            _ => return Err(bad("output_weight")),
        }
        if self.output_bias.shape() != [v] {
            return Err(bad("output_bias"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `logits[position, correct] - logits[position, wrong]`.
pub fn qoi_score(logits: &Tensor, position: usize, correct: usize, wrong: usize) -> Result<f64> {
    if position >= logits.rows() {
        return Err(Error::Input(format!("mask position {position} absent")));
    }
    if correct >= logits.cols() || wrong >= logits.cols() {
        return Err(Error::Input("qoi class id out of range".into()));
    }
    Ok(logits.at(position, correct) - logits.at(position, wrong))
}

/// Moves each traced row of `embeddings` toward `baseline` along one shared
/// `alpha`: `x_b + alpha (x_i - x_b)`. Other rows are left untouched.
pub fn interpolate_input(
    embeddings: &Tensor,
    baseline: &[f64],
    traced: &[usize],
    alpha: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha {alpha} outside [0, 1]")));
    }
    if baseline.len() != embeddings.cols() {
        return Err(Error::Shape("baseline width".into()));
    }
    let mut out = embeddings.clone();
    if alpha == 1.0 {
        return Ok(out);
    }
    for &i in traced {
        if i >= out.rows() {
            return Err(Error::Input(format!("traced position {i} out of range")));
        }
        for (o, b) in out.row_mut(i).iter_mut().zip(baseline) {
            *o = b + alpha * (*o - b);
        }
    }
    Ok(out)
}
