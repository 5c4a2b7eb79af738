//! Loop-based reimplementation of the encoder, generic over the scalar type.
//!
//! Shares no code with the tape: evaluated with `f64` it recomputes the
//! forward pass; evaluated with [`Dual`] it yields exact directional
//! derivatives of any sub-function (one tangent per pass).

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::numerics::tape::LAYER_NORM_EPS;
use crate::numerics::Tensor;
use crate::transformer::ToyTransformer;

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Forward-mode dual number `v + d ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.v / o.v, (self.d * o.v - self.v * o.d) / (o.v * o.v))
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl Scalar for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual::new(s, self.d / (2.0 * s))
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (1.0 - t * t))
    }
}

pub type Rows<S> = Vec<Vec<S>>;

fn lift<S: Scalar>(row: &[f64]) -> Vec<S> {
    row.iter().map(|&v| S::cst(v)).collect()
}

/// `x · W[:, cols] + b[cols]` for one row, `W` being `[in, out]`.
fn affine<S: Scalar>(x: &[S], w: &Tensor, b: &Tensor, cols: std::ops::Range<usize>) -> Vec<S> {
    let out_w = w.cols();
    cols.map(|c| {
        let mut acc = S::cst(b.data()[c]);
        for (r, xv) in x.iter().enumerate() {
            acc = acc + *xv * S::cst(w.data()[r * out_w + c]);
        }
        acc
    })
    .collect()
}

fn layer_norm<S: Scalar>(x: &[S], gamma: &Tensor, beta: &Tensor) -> Vec<S> {
    let n = S::cst(x.len() as f64);
    let mean = x.iter().fold(S::cst(0.0), |a, v| a + *v) / n;
    let var = x
        .iter()
        .fold(S::cst(0.0), |a, v| a + (*v - mean) * (*v - mean))
        / n;
    let inv = S::cst(1.0) / (var + S::cst(LAYER_NORM_EPS)).sqrt();
    x.iter()
        .enumerate()
        .map(|(c, v)| S::cst(gamma.data()[c]) * ((*v - mean) * inv) + S::cst(beta.data()[c]))
        .collect()
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::cst(0.797_884_560_802_865_4);
    let k = S::cst(0.044_715);
    S::cst(0.5) * x * (S::cst(1.0) + (c * (x + k * x * x * x)).tanh())
}

/// Input to block `layer` (1-based) given `h^{layer-1}`.
pub fn block_input<S: Scalar>(model: &ToyTransformer, layer: usize, prev: &Rows<S>) -> Rows<S> {
    if layer == 1 {
        prev.iter()
            .enumerate()
            .map(|(j, r)| {
                r.iter()
                    .zip(model.position_embedding.row(j))
                    .map(|(v, p)| *v + S::cst(*p))
                    .collect()
            })
            .collect()
    } else {
        prev.clone()
    }
}

/// Head outputs `[head][target][dh]` of block `layer` from its input rows.
pub fn heads<S: Scalar>(model: &ToyTransformer, layer: usize, input: &Rows<S>) -> Vec<Rows<S>> {
    let p = &model.layers[layer - 1];
    let dh = model.config.head_dim();
    let n = input.len();
    let scale = S::cst(1.0 / (dh as f64).sqrt());
    (0..model.config.heads)
        .map(|a| {
            let cols = a * dh..(a + 1) * dh;
            let q: Rows<S> = input.iter().map(|x| affine(x, &p.wq, &p.bq, cols.clone())).collect();
            let k: Rows<S> = input.iter().map(|x| affine(x, &p.wk, &p.bk, cols.clone())).collect();
            let v: Rows<S> = input.iter().map(|x| affine(x, &p.wv, &p.bv, cols.clone())).collect();
            (0..n)
                .map(|j| {
                    let scores: Vec<S> = (0..n)
                        .map(|i| {
                            let mut s = S::cst(0.0);
                            for d in 0..dh {
                                s = s + q[j][d] * k[i][d];
                            }
                            s * scale
                        })
                        .collect();
                    let max = scores.iter().map(|s| s.val()).fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<S> = scores.iter().map(|s| (*s - S::cst(max)).exp()).collect();
                    let z = e.iter().fold(S::cst(0.0), |a, v| a + *v);
                    let mut out = vec![S::cst(0.0); dh];
                    for i in 0..n {
                        let w = e[i] / z;
                        for d in 0..dh {
                            out[d] = out[d] + w * v[i][d];
                        }
                    }
                    out
                })
                .collect()
        })
        .collect()
}

/// `h^layer_j` from the A head outputs at `j` and the skip row.
pub fn combine<S: Scalar>(model: &ToyTransformer, layer: usize, heads_j: &[Vec<S>], skip: &[S]) -> Vec<S> {
    let p = &model.layers[layer - 1];
    let h = model.config.hidden;
    let cat: Vec<S> = heads_j.iter().flatten().copied().collect();
    let att = affine(&cat, &p.wo, &p.bo, 0..h);
    let sum1: Vec<S> = skip.iter().zip(&att).map(|(a, b)| *a + *b).collect();
    let u = layer_norm(&sum1, &p.ln1_gamma, &p.ln1_beta);
    let f1: Vec<S> = affine(&u, &p.w1, &p.b1, 0..model.config.ffn_width)
        .into_iter()
        .map(gelu)
        .collect();
    let f2 = affine(&f1, &p.w2, &p.b2, 0..h);
    let sum2: Vec<S> = u.iter().zip(&f2).map(|(a, b)| *a + *b).collect();
    layer_norm(&sum2, &p.ln2_gamma, &p.ln2_beta)
}

/// `h^layer` from `h^{layer-1}`.
pub fn block<S: Scalar>(model: &ToyTransformer, layer: usize, prev: &Rows<S>) -> Rows<S> {
    let input = block_input(model, layer, prev);
    let hs = heads(model, layer, &input);
    (0..input.len())
        .map(|j| {
            let hj: Vec<Vec<S>> = hs.iter().map(|h| h[j].clone()).collect();
            combine(model, layer, &hj, &input[j])
        })
        .collect()
}

pub fn logits_row<S: Scalar>(model: &ToyTransformer, top: &[S]) -> Vec<S> {
    let v = model.config.vocab;
    match &model.output_weight {
        Some(w) => affine(top, w, &model.output_bias, 0..v),
        None => (0..v)
            .map(|c| {
                let mut acc = S::cst(model.output_bias.data()[c]);
                for (d, x) in top.iter().enumerate() {
                    acc = acc + *x * S::cst(model.token_embedding.at(c, d));
                }
                acc
            })
            .collect(),
    }
}

/// Full forward from word embeddings; returns `h^0..=h^L` and the logits rows.
pub fn forward<S: Scalar>(model: &ToyTransformer, x: &Tensor) -> (Vec<Rows<S>>, Rows<S>) {
    let mut hs: Vec<Rows<S>> = vec![(0..x.rows()).map(|j| lift(x.row(j))).collect()];
    for l in 1..=model.config.layers {
        let next = block(model, l, hs.last().expect("non-empty"));
        hs.push(next);
    }
    let logits = hs
        .last()
        .expect("non-empty")
        .iter()
        .map(|r| logits_row(model, r))
        .collect();
    (hs, logits)
}

/// Jacobian `[m, n]` of `f: R^n -> R^m` at `x`, one dual pass per column.
pub fn dual_jacobian<F>(f: F, x: &[f64]) -> Tensor
where
    F: Fn(&[Dual]) -> Vec<Dual>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for c in 0..n {
        let xd: Vec<Dual> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| Dual::new(v, if i == c { 1.0 } else { 0.0 }))
            .collect();
        cols.push(f(&xd).into_iter().map(|d| d.d).collect::<Vec<f64>>());
    }
    let m = cols.first().map_or(0, Vec::len);
    let mut jac = Tensor::zeros(&[m, n]);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            jac.data_mut()[r * n + c] = *v;
        }
    }
    jac
}

/// Lifts `f64` rows into `S`.
pub fn lift_rows<S: Scalar>(rows: &[Vec<f64>]) -> Rows<S> {
    rows.iter().map(|r| lift(r)).collect()
}
