//! Tensor-level reverse-mode tape with named cut points.
//!
//! Every primitive appends one entry holding its output value and the saved
//! state needed to pull a cotangent back through it. Markers name an
//! activation (optionally a single row of it) so that callers can ask for the
//! vector-Jacobian product between any two of them. The reverse sweep is
//! re-seeded at the upper marker and read out at the lower one; the tape
//! itself is never modified after recording, so sweeps can run concurrently.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to one recorded activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named cut point: a whole activation, or one row of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Marker {
    pub var: Var,
    pub row: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every op output is rounded through `f32`.
    F32,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f64" | "float64" | "double" => Ok(Self::F64),
            "f32" | "float32" | "single" => Ok(Self::F32),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Copy(Var),
    ReplaceRows { x: Var, rows: Vec<usize> },
    LogitDiff {
        x: Var,
        row: usize,
        plus: usize,
        minus: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Copy(..) => "copy",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::LogitDiff { .. } => "logit_diff",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::Softmax(x) | Op::Gelu(x) | Op::Copy(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } => vec![*table],
            Op::SliceCols { x, .. } | Op::ReplaceRows { x, .. } | Op::LogitDiff { x, .. } => {
                vec![*x]
            }
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter/input gradients from a full reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone)]
pub struct Tape {
    entries: Vec<Entry>,
    markers: Vec<(String, Marker)>,
    by_name: HashMap<String, usize>,
    record: bool,
    precision: Precision,
    scope: String,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            entries: Vec::new(),
            markers: Vec::new(),
            by_name: HashMap::new(),
            record: true,
            precision,
            scope: String::from("<root>"),
        }
    }

    /// A tape that keeps values but no reverse-mode state.
    pub fn eager(precision: Precision) -> Self {
        Self {
            record: false,
            ..Self::with_precision(precision)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Names the region subsequent ops belong to; used in fault messages.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of non-leaf ops recorded.
    pub fn op_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !matches!(e.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        self.round(&mut value);
        self.entries.push(Entry {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    fn round(&self, t: &mut Tensor) {
        if self.precision == Precision::F32 {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                scope: self.scope.clone(),
            });
        }
        self.round(&mut value);
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.entries[v.0].requires_grad);
        let op = if self.record { op } else { Op::Leaf };
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.entries.len() - 1))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.entries[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt [{m},{k}] x [{n},{k2}]ᵀ")));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` activation.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "bias of length {} for width {n}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for r in 0..m {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scaled(c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Shape("layer norm affine width".into()));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(&[m, n]);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            let orow = out.row_mut(r);
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                orow[c] = g[c] * h + b[c];
            }
        }
        let op = if self.record {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Vec::new(),
                inv_std: Vec::new(),
            }
        };
        self.push(out, op)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let x = *v;
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            *v = 0.5 * x * (1.0 + t);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Embedding lookup: row `ids[r]` of `table` becomes output row `r`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("id {bad} out of range for {v} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + len > n {
            return Err(Error::Shape(format!("slice {start}+{len} of width {n}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0]).0;
        if parts.iter().any(|p| self.dims2(*p).0 != m) {
            return Err(Error::Shape("concat row mismatch".into()));
        }
        let n: usize = parts.iter().map(|p| self.dims2(*p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Identity; gives a value its own cut point.
    pub fn copy(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::Copy(x))
    }

    /// Overwrites whole rows with fixed values. Replaced rows pass no gradient.
    pub fn replace_rows(&mut self, x: Var, rows: &[(usize, Vec<f64>)]) -> Result<Var> {
        let mut out = self.value(x).clone();
        let (m, n) = (out.rows(), out.cols());
        for (r, vals) in rows {
            if *r >= m || vals.len() != n {
                return Err(Error::Shape(format!("replace row {r} width {}", vals.len())));
            }
            out.row_mut(*r).copy_from_slice(vals);
        }
        self.push(
            out,
            Op::ReplaceRows {
                x,
                rows: rows.iter().map(|(r, _)| *r).collect(),
            },
        )
    }

    /// Scalar `x[row, plus] - x[row, minus]`.
    pub fn logit_diff(&mut self, x: Var, row: usize, plus: usize, minus: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if row >= m || plus >= n || minus >= n {
            return Err(Error::Input(format!(
                "logit index ({row},{plus},{minus}) outside [{m},{n}]"
            )));
        }
        let xv = self.value(x);
        let out = Tensor::scalar(xv.at(row, plus) - xv.at(row, minus));
        self.push(
            out,
            Op::LogitDiff {
                x,
                row,
                plus,
                minus,
            },
        )
    }

    pub fn mark(&mut self, name: impl Into<String>, var: Var, row: Option<usize>) -> Result<()> {
        let name = name.into();
        if let Some(r) = row {
            if r >= self.value(var).rows() {
                return Err(Error::Shape(format!("marker `{name}` row {r} out of range")));
            }
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::Input(format!("marker `{name}` registered twice")));
        }
        self.by_name.insert(name.clone(), self.markers.len());
        self.markers.push((name, Marker { var, row }));
        Ok(())
    }

    pub fn marker(&self, name: &str) -> Result<Marker> {
        self.by_name
            .get(name)
            .map(|&i| self.markers[i].1)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn markers(&self) -> impl Iterator<Item = (&str, Marker)> {
        self.markers.iter().map(|(n, m)| (n.as_str(), *m))
    }

    pub fn marker_value(&self, m: Marker) -> &[f64] {
        let t = self.value(m.var);
        match m.row {
            Some(r) => t.row(r),
            None => t.data(),
        }
    }

    /// Named form of [`Tape::vjp_markers`].
    pub fn vjp_segment(&self, upper: &str, lower: &str, cotangent: &Tensor) -> Result<Tensor> {
        let u = self.marker(upper)?;
        let l = self.marker(lower)?;
        if u.var <= l.var {
            return Err(Error::NotDownstream {
                upper: upper.into(),
                lower: lower.into(),
            });
        }
        let g = self.vjp_markers(u, l, cotangent.data())?;
        let shape = match l.row {
            Some(_) => vec![g.len()],
            None => self.value(l.var).shape().to_vec(),
        };
        Tensor::new(shape, g)
    }

    /// `cotangentᵀ · ∂upper/∂lower`, summed over every recorded path between
    /// the two markers.
    pub fn vjp_markers(&self, upper: Marker, lower: Marker, cotangent: &[f64]) -> Result<Vec<f64>> {
        let adj = self.vjp_to_var(upper, cotangent, lower.var)?;
        Ok(match lower.row {
            Some(r) => adj.row(r).to_vec(),
            None => adj.into_data(),
        })
    }

    /// Full adjoint of `lower` for a cotangent seeded at `upper`.
    pub fn vjp_to_var(&self, upper: Marker, cotangent: &[f64], lower: Var) -> Result<Tensor> {
        if !self.record {
            return Err(Error::NotRecorded);
        }
        if upper.var <= lower {
            return Err(Error::NotDownstream {
                upper: format!("var {}", upper.var.0),
                lower: format!("var {}", lower.0),
            });
        }
        let seed = self.seed(upper, cotangent)?;
        let floor = lower.0;
        let span = upper.var.0 - floor + 1;
        let mut dep = vec![false; span];
        dep[0] = true;
        for (off, e) in self.entries[floor + 1..=upper.var.0].iter().enumerate() {
            dep[off + 1] = e.op.inputs().iter().any(|v| v.0 >= floor && dep[v.0 - floor]);
        }
        if !dep[span - 1] {
            return Ok(Tensor::zeros(self.value(lower).shape()));
        }
        let mut adj = self.reverse(upper.var, seed, floor, &dep);
        Ok(adj[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(lower).shape())))
    }

    /// Reverse sweep over the whole tape into every `requires_grad` entry.
    pub fn backward(&self, output: Var, cotangent: &Tensor) -> Result<Gradients> {
        if !self.record {
            return Err(Error::NotRecorded);
        }
        let seed = self.seed(
            Marker {
                var: output,
                row: None,
            },
            cotangent.data(),
        )?;
        let want: Vec<bool> = self.entries[..=output.0]
            .iter()
            .map(|e| e.requires_grad)
            .collect();
        let adjoints = self.reverse(output, seed, 0, &want);
        Ok(Gradients { adjoints })
    }

    fn seed(&self, m: Marker, cotangent: &[f64]) -> Result<Tensor> {
        let t = self.value(m.var);
        match m.row {
            Some(r) => {
                if cotangent.len() != t.cols() {
                    return Err(Error::Shape(format!(
                        "cotangent of length {} for row width {}",
                        cotangent.len(),
                        t.cols()
                    )));
                }
                let mut s = Tensor::zeros(t.shape());
                s.row_mut(r).copy_from_slice(cotangent);
                Ok(s)
            }
            None => {
                if cotangent.len() != t.len() {
                    return Err(Error::Shape(format!(
                        "cotangent of length {} for activation of size {}",
                        cotangent.len(),
                        t.len()
                    )));
                }
                Tensor::new(t.shape().to_vec(), cotangent.to_vec())
            }
        }
    }

    fn reverse(&self, top: Var, seed: Tensor, floor: usize, want: &[bool]) -> Vec<Option<Tensor>> {
        let span = top.0 - floor + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; span];
        adj[span - 1] = Some(seed);
        for idx in (floor + 1..=top.0).rev() {
            let Some(g) = adj[idx - floor].take() else {
                continue;
            };
            let wanted = |v: Var| v.0 >= floor && want[v.0 - floor];
            self.pull(idx, &g, &wanted, &mut |v, t| {
                let slot = &mut adj[v.0 - floor];
                match slot {
                    Some(acc) => acc.add_assign(&t),
                    None => *slot = Some(t),
                }
            });
            adj[idx - floor] = Some(g);
        }
        adj
    }

    /// Pushes `g` (adjoint of entry `idx`) into the entry's wanted inputs.
    fn pull(
        &self,
        idx: usize,
        g: &Tensor,
        wanted: &dyn Fn(Var) -> bool,
        emit: &mut dyn FnMut(Var, Tensor),
    ) {
        let e = &self.entries[idx];
        match &e.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if wanted(*a) {
                    let ga = matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    emit(*a, Tensor::new(vec![m, k], ga).expect("shape"));
                }
                if wanted(*b) {
                    let gb = matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                    emit(*b, Tensor::new(vec![k, n], gb).expect("shape"));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).0;
                if wanted(*a) {
                    let ga = matmul(g.data(), self.value(*b).data(), m, n, k);
                    emit(*a, Tensor::new(vec![m, k], ga).expect("shape"));
                }
                if wanted(*b) {
                    let gb = matmul_tn(g.data(), self.value(*a).data(), m, n, k);
                    emit(*b, Tensor::new(vec![n, k], gb).expect("shape"));
                }
            }
            Op::AddBias(x, bias) => {
                if wanted(*x) {
                    emit(*x, g.clone());
                }
                if wanted(*bias) {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    emit(
                        *bias,
                        Tensor::new(self.value(*bias).shape().to_vec(), gb).expect("shape"),
                    );
                }
            }
            Op::Add(a, b) => {
                if wanted(*a) {
                    emit(*a, g.clone());
                }
                if wanted(*b) {
                    emit(*b, g.clone());
                }
            }
            Op::Scale(x, c) => {
                if wanted(*x) {
                    emit(*x, g.scaled(*c));
                }
            }
            Op::Softmax(x) => {
                if wanted(*x) {
                    let y = &e.value;
                    let mut gx = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s = dot(g.row(r), yr);
                        for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(yr) {
                            *o = yv * (gv - s);
                        }
                    }
                    emit(*x, gx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (g.rows(), g.cols());
                if wanted(*gamma) {
                    let mut gg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g.at(r, c) * xhat[r * n + c];
                        }
                    }
                    emit(
                        *gamma,
                        Tensor::new(self.value(*gamma).shape().to_vec(), gg).expect("shape"),
                    );
                }
                if wanted(*beta) {
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    emit(
                        *beta,
                        Tensor::new(self.value(*beta).shape().to_vec(), gb).expect("shape"),
                    );
                }
                if wanted(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = Tensor::zeros(g.shape());
                    let nf = n as f64;
                    for r in 0..m {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let gr = g.row(r);
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for c in 0..n {
                            let gh = gr[c] * gam[c];
                            sum_g += gh;
                            sum_gx += gh * xh[c];
                        }
                        let inv = inv_std[r];
                        let orow = gx.row_mut(r);
                        for c in 0..n {
                            let gh = gr[c] * gam[c];
                            orow[c] = inv / nf * (nf * gh - sum_g - xh[c] * sum_gx);
                        }
                    }
                    emit(*x, gx);
                }
            }
            Op::Gelu(x) => {
                if wanted(*x) {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (o, xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                        let x = *xi;
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *o *= d;
                    }
                    emit(*x, gx);
                }
            }
            Op::Gather { table, ids } => {
                if wanted(*table) {
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    for (r, &i) in ids.iter().enumerate() {
                        for (acc, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    emit(*table, gt);
                }
            }
            Op::SliceCols { x, start } => {
                if wanted(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let len = g.cols();
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                    }
                    emit(*x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.dims2(*p).1;
                    if wanted(*p) {
                        let mut gp = Tensor::zeros(self.value(*p).shape());
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        emit(*p, gp);
                    }
                    off += w;
                }
            }
            Op::Copy(x) => {
                if wanted(*x) {
                    emit(*x, g.clone());
                }
            }
            Op::ReplaceRows { x, rows } => {
                if wanted(*x) {
                    let mut gx = g.clone();
                    for &r in rows {
                        gx.row_mut(r).fill(0.0);
                    }
                    emit(*x, gx);
                }
            }
            Op::LogitDiff {
                x,
                row,
                plus,
                minus,
            } => {
                if wanted(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let n = gx.cols();
                    let s = g.data()[0];
                    gx.data_mut()[row * n + plus] += s;
                    gx.data_mut()[row * n + minus] -= s;
                    emit(*x, gx);
                }
            }
        }
    }
}

/// Runs `f` on a fresh recording tape with `inputs` as a differentiable leaf.
///
/// The input leaf is registered as marker `"input"` and the returned output
/// as `"output"`.
pub fn forward_taped<F>(f: F, inputs: &Tensor) -> Result<(Tensor, Tape)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if !inputs.is_finite() {
        return Err(Error::Input("non-finite input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(inputs.clone(), true);
    tape.mark("input", x, None)?;
    let y = f(&mut tape, x)?;
    tape.mark("output", y, None)?;
    Ok((tape.value(y).clone(), tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::finite_difference_jacobian;

    #[test]
    fn identity_model_records_one_op() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let (y, tape) = forward_taped(|t, v| t.copy(v), &x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        assert_eq!(tape.op_count(), 1);
        assert!(tape.marker("input").is_ok() && tape.marker("output").is_ok());
    }

    #[test]
    fn affine_model() {
        let x = Tensor::vector(vec![3.0]);
        let (y, tape) = forward_taped(
            |t, v| {
                let two = t.scale(v, 2.0)?;
                let one = t.leaf(Tensor::vector(vec![1.0]), false);
                t.add(two, one)
            },
            &x,
        )
        .unwrap();
        assert_eq!(y.data(), &[7.0]);
        let g = tape
            .vjp_segment("output", "input", &Tensor::vector(vec![1.0]))
            .unwrap();
        assert_eq!(g.data(), &[2.0]);
    }

    #[test]
    fn linear_and_square_vjps() {
        let (_, tape) = forward_taped(|t, v| t.scale(v, 3.0), &Tensor::vector(vec![5.0])).unwrap();
        let g = tape
            .vjp_segment("output", "input", &Tensor::vector(vec![1.0]))
            .unwrap();
        assert_eq!(g.data(), &[3.0]);

        // y = x * x via a 1x1 matmul
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let (y, tape) = forward_taped(|t, v| t.matmul(v, v), &x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = tape
            .vjp_segment("output", "input", &Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[4.0]);
    }

    #[test]
    fn unknown_and_reversed_markers_fail() {
        let (_, tape) = forward_taped(|t, v| t.copy(v), &Tensor::vector(vec![1.0])).unwrap();
        let c = Tensor::vector(vec![1.0]);
        assert!(matches!(
            tape.vjp_segment("nope", "input", &c),
            Err(Error::UnknownNode(_))
        ));
        assert!(matches!(
            tape.vjp_segment("input", "output", &c),
            Err(Error::NotDownstream { .. })
        ));
        assert!(matches!(
            tape.vjp_segment("output", "input", &Tensor::vector(vec![1.0, 2.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_reports_scope() {
        let x = Tensor::vector(vec![1e300]);
        let err = forward_taped(
            |t, v| {
                t.set_scope("blowup");
                t.scale(v, 1e300)
            },
            &x,
        )
        .unwrap_err();
        match err {
            Error::NonFinite { op, scope } => {
                assert_eq!(op, "scale");
                assert_eq!(scope, "blowup");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eager_tape_matches_recorded_values() {
        let build = |t: &mut Tape| -> Result<Var> {
            let a = t.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.7])?, true);
            let g = t.leaf(Tensor::vector(vec![1.0, 0.5, 2.0]), false);
            let b = t.leaf(Tensor::vector(vec![0.0, 0.1, -0.1]), false);
            let n = t.layer_norm_rows(a, g, b)?;
            let s = t.softmax_rows(n)?;
            t.gelu(s)
        };
        let mut rec = Tape::new();
        let y1 = build(&mut rec).unwrap();
        let mut eager = Tape::eager(Precision::F64);
        let y2 = build(&mut eager).unwrap();
        assert_eq!(rec.value(y1), eager.value(y2));
        eager.mark("y", y2, None).unwrap();
        assert!(matches!(
            eager.vjp_to_var(eager.marker("y").unwrap(), &[0.0; 6], Var(0)),
            Err(Error::NotRecorded)
        ));
    }

    fn check_primitive<F>(f: F, x: Tensor)
    where
        F: Fn(&mut Tape, Var) -> Result<Var> + Copy,
    {
        let (y, tape) = forward_taped(f, &x).unwrap();
        let eval = |p: &[f64]| -> Vec<f64> {
            let t = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
            forward_taped(f, &t).unwrap().0.into_data()
        };
        let jac = finite_difference_jacobian(eval, x.data(), 1e-4).unwrap();
        let m = y.len();
        let n = x.len();
        for out in 0..m {
            let mut cot = vec![0.0; m];
            cot[out] = 1.0;
            let g = tape
                .vjp_segment("output", "input", &Tensor::new(y.shape().to_vec(), cot).unwrap())
                .unwrap();
            for i in 0..n {
                let fd = jac.at(out, i);
                let an = g.data()[i];
                let scale = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / scale < 1e-6,
                    "d out{out}/d in{i}: fd {fd} vs tape {an}"
                );
            }
        }
    }

    fn sample_input() -> Tensor {
        Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.6]).unwrap()
    }

    #[test]
    fn primitives_match_finite_differences() {
        check_primitive(
            |t, v| {
                let w = t.leaf(
                    Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap(),
                    false,
                );
                t.matmul(v, w)
            },
            sample_input(),
        );
        check_primitive(|t, v| t.matmul_nt(v, v), sample_input());
        check_primitive(|t, v| t.softmax_rows(v), sample_input());
        check_primitive(
            |t, v| {
                let g = t.leaf(Tensor::vector(vec![1.3, -0.2, 0.7]), false);
                let b = t.leaf(Tensor::vector(vec![0.1, 0.0, -0.3]), false);
                t.layer_norm_rows(v, g, b)
            },
            sample_input(),
        );
        check_primitive(|t, v| t.gelu(v), sample_input());
        check_primitive(
            |t, v| {
                let b = t.leaf(Tensor::vector(vec![0.2, -0.1, 0.4]), false);
                t.add_bias(v, b)
            },
            sample_input(),
        );
        // embedding lookup: gradient w.r.t. the table
        check_primitive(|t, v| t.gather(v, &[1, 0, 1]), sample_input());
        check_primitive(
            |t, v| {
                let a = t.slice_cols(v, 1, 2)?;
                let b = t.slice_cols(v, 0, 1)?;
                t.concat_cols(&[a, b])
            },
            sample_input(),
        );
        check_primitive(|t, v| t.logit_diff(v, 1, 2, 0), sample_input());
        check_primitive(
            |t, v| t.replace_rows(v, &[(0, vec![9.0, 9.0, 9.0])]),
            sample_input(),
        );
    }

    #[test]
    fn parameter_gradients_via_backward() {
        let mut t = Tape::new();
        let x = t.leaf(sample_input(), false);
        let w = t.leaf(
            Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap(),
            true,
        );
        let y = t.matmul(x, w).unwrap();
        let grads = t.backward(y, &Tensor::full(&[2, 2], 1.0)).unwrap();
        let gw = grads.get(w).unwrap();
        // d(sum(xW))/dW[p,q] = sum_i x[i,p]
        assert!((gw.at(0, 0) - 1.8).abs() < 1e-12);
        assert!((gw.at(1, 1) + 1.1).abs() < 1e-12);
        assert!(grads.get(x).is_none());
    }
}
