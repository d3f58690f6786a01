//! Recorded computation with hand-written reverse passes.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably, records every op applied
//! to its [`Var`]s, and on [`Tape::backward`] returns [`Gradients`] holding
//! the adjoint of every node. Parameter gradients are folded back into the
//! store by the caller once the tape is dropped.

use std::collections::HashMap;

use super::array::{mm, mm_nt, mm_tn, shape_mismatch, Array};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array, inv_std: Vec<f64> },
    Gelu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var, Axis),
    SegmentSoftmax(Var, Vec<usize>),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize),
    CrossEntropy { logits: Var, targets: Vec<usize>, coef: Vec<f64>, probs: Array },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Gather(..) => "embedding_lookup",
            Op::ScatterAdd(..) => "scatter_add",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax(..) => "softmax",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

enum Value {
    Owned(Array),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// Fault injection for the gradient checker: scales the backward output of
/// one op kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: &'static str,
    pub factor: f64,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    check_finite: bool,
    fault: Option<BackwardFault>,
}

/// Adjoints of every node of a tape after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.of(*v))
    }

    /// `store.grad[p] += scale * dL/dp` for every parameter reached.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for &(p, v) in &self.params {
            if let Some(g) = self.of(v) {
                store.accumulate(p, g, scale);
            }
        }
    }
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact erf-based GELU.
pub fn gelu(x: f64) -> f64 {
    x * gelu_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    gelu_cdf(x) + x * pdf
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), check_finite: false, fault: None }
    }

    /// Reject NaN/Inf in every op output.
    pub fn with_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn with_fault(mut self, fault: Option<BackwardFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Array, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numerical(format!("{} produced a non-finite value", op.name())));
        }
        self.nodes.push(Node { value: Value::Owned(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input whose adjoint can be read after backward.
    pub fn input(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_mismatch("matmul", x.shape(), y.shape()));
        }
        let out = mm(x, y);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(shape_mismatch("matmul_nt", x.shape(), y.shape()));
        }
        let out = mm_nt(x, y);
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_mismatch("add", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        out.add_assign(y);
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast-add a `1 x d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(bias));
        if b.rows() != 1 || a.cols() != b.cols() {
            return Err(shape_mismatch("add_row", a.shape(), b.shape()));
        }
        let mut out = a.clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(x, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_mismatch("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Array::from_vec(x.rows(), x.cols(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Scale row `r` of `x` by `col[r]`; `col` is `n x 1`.
    pub fn mul_col(&mut self, col: Var, x: Var) -> Result<Var> {
        let (c, a) = (self.value(col), self.value(x));
        if c.cols() != 1 || c.rows() != a.rows() {
            return Err(shape_mismatch("mul_col", c.shape(), a.shape()));
        }
        let mut out = a.clone();
        for r in 0..out.rows() {
            let s = c.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::MulCol(col, x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    /// Row gather: output row `k` is `table[idx[k]]`.
    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Array::zeros(idx.len(), d);
        for (k, &i) in idx.iter().enumerate() {
            if i >= t.rows() {
                return Err(Error::Index { what: "embedding rows", index: i, len: t.rows() });
            }
            out.row_mut(k).copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather(table, idx.to_vec()))
    }

    /// Row scatter-add: `out[idx[p]] += x[p]`, with `n` output rows.
    pub fn scatter_add(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let a = self.value(x);
        if idx.len() != a.rows() {
            return Err(Error::Contract(format!("scatter_add: {} indices for {} rows", idx.len(), a.rows())));
        }
        let mut out = Array::zeros(n, a.cols());
        for (p, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Index { what: "scatter rows", index: i, len: n });
            }
            for (o, v) in out.row_mut(i).iter_mut().zip(a.row(p)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAdd(x, idx.to_vec()))
    }

    /// Row-wise layer normalization with learnable `1 x d` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (a, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let d = a.cols();
        if g.shape() != [1, d] || b.shape() != [1, d] {
            return Err(shape_mismatch("layer_norm", a.shape(), g.shape()));
        }
        let mut xhat = Array::zeros(a.rows(), d);
        let mut out = Array::zeros(a.rows(), d);
        let mut inv_std = Vec::with_capacity(a.rows());
        for r in 0..a.rows() {
            let row = a.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let out = Array::from_vec(a.rows(), a.cols(), a.data().iter().map(|&v| gelu(v)).collect())?;
        self.push(out, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let a = self.value(x);
        let data = a.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let out = Array::from_vec(a.rows(), a.cols(), data)?;
        self.push(out, Op::LeakyRelu(x, slope))
    }

    /// Max-stabilized softmax along `axis` (`Cols` normalizes each row).
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let a = self.value(x);
        let out = match axis {
            Axis::Cols => {
                let mut out = a.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
            Axis::Rows => {
                let mut out = a.clone();
                let mut col = vec![0.0; a.rows()];
                for c in 0..a.cols() {
                    for r in 0..a.rows() {
                        col[r] = a.get(r, c);
                    }
                    softmax_in_place(&mut col);
                    for r in 0..a.rows() {
                        out.set(r, c, col[r]);
                    }
                }
                out
            }
        };
        self.push(out, Op::Softmax(x, axis))
    }

    /// Softmax of an `n x 1` column within groups: rows sharing `group[r]`
    /// are normalized together.
    pub fn segment_softmax(&mut self, x: Var, group: &[usize]) -> Result<Var> {
        let a = self.value(x);
        if a.cols() != 1 || group.len() != a.rows() {
            return Err(Error::Contract(format!(
                "segment_softmax: {:?} with {} group labels",
                a.shape(),
                group.len()
            )));
        }
        let n_groups = group.iter().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (r, &g) in group.iter().enumerate() {
            max[g] = max[g].max(a.data()[r]);
        }
        let mut out = Array::zeros(a.rows(), 1);
        let mut sum = vec![0.0; n_groups];
        for (r, &g) in group.iter().enumerate() {
            let e = (a.data()[r] - max[g]).exp();
            out.data_mut()[r] = e;
            sum[g] += e;
        }
        for (r, &g) in group.iter().enumerate() {
            out.data_mut()[r] /= sum[g];
        }
        self.push(out, Op::SegmentSoftmax(x, group.to_vec()))
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero arrays".into()));
        }
        let first = self.value(xs[0]).shape();
        let out = match axis {
            Axis::Cols => {
                let rows = first[0];
                let mut cols = 0;
                for &v in xs {
                    let s = self.shape(v);
                    if s[0] != rows {
                        return Err(shape_mismatch("concat(cols)", first, s));
                    }
                    cols += s[1];
                }
                let mut out = Array::zeros(rows, cols);
                for r in 0..rows {
                    let mut off = 0;
                    for &v in xs {
                        let a = self.value(v);
                        out.row_mut(r)[off..off + a.cols()].copy_from_slice(a.row(r));
                        off += a.cols();
                    }
                }
                out
            }
            Axis::Rows => {
                let cols = first[1];
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in xs {
                    let a = self.value(v);
                    if a.cols() != cols {
                        return Err(shape_mismatch("concat(rows)", first, a.shape()));
                    }
                    rows += a.rows();
                    data.extend_from_slice(a.data());
                }
                Array::from_vec(rows, cols, data)?
            }
        };
        self.push(out, Op::Concat(xs.to_vec(), axis))
    }

    /// Contiguous `len` rows (`Axis::Rows`) or columns (`Axis::Cols`) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let a = self.value(x);
        let out = match axis {
            Axis::Rows => {
                if start + len > a.rows() {
                    return Err(Error::Contract(format!("slice rows {start}..{} of {:?}", start + len, a.shape())));
                }
                Array::from_vec(len, a.cols(), a.data()[start * a.cols()..(start + len) * a.cols()].to_vec())?
            }
            Axis::Cols => {
                if start + len > a.cols() {
                    return Err(Error::Contract(format!("slice cols {start}..{} of {:?}", start + len, a.shape())));
                }
                let mut out = Array::zeros(a.rows(), len);
                for r in 0..a.rows() {
                    out.row_mut(r).copy_from_slice(&a.row(r)[start..start + len]);
                }
                out
            }
        };
        self.push(out, Op::Slice(x, axis, start))
    }

    /// Weighted mean cross-entropy over the positions selected by `mask`:
    /// `sum_{i in mask} w_i * CE_i / |mask|`. An empty mask yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool], weights: &[f64]) -> Result<Var> {
        let a = self.value(logits);
        let n = a.rows();
        if targets.len() != n || mask.len() != n || weights.len() != n {
            return Err(Error::Contract(format!(
                "cross_entropy: logits {:?} with {} targets, {} mask, {} weights",
                a.shape(),
                targets.len(),
                mask.len(),
                weights.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut probs = a.clone();
        let mut coef = vec![0.0; n];
        let mut loss = 0.0;
        for r in 0..n {
            softmax_in_place(probs.row_mut(r));
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= a.cols() {
                return Err(Error::Index { what: "cross_entropy classes", index: t, len: a.cols() });
            }
            let row = a.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            coef[r] = weights[r] / count as f64;
            loss += coef[r] * (lse - row[t]);
        }
        self.push(Array::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), coef, probs })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward op was recorded".into()));
        }
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {s:?}")));
        }
        self.backward_with_seed(loss, Array::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary adjoint for `out`.
    pub fn backward_with_seed(&self, out: Var, seed: Array) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward op was recorded".into()));
        }
        if seed.shape() != self.shape(out) {
            return Err(shape_mismatch("backward seed", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            if let Some(f) = self.fault {
                if f.op == op.name() {
                    let mut scaled = g.clone();
                    scaled.scale_assign(f.factor);
                    self.propagate(op, i, &scaled, &mut grads);
                    grads[i] = Some(g);
                    continue;
                }
            }
            self.propagate(op, i, &g, &mut grads);
            if self.check_finite && !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at {} (node {i})", op.name())));
            }
            grads[i] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, op: &Op, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let out = self.value(Var(i));
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, mm_nt(g, self.value(*b)));
                acc(grads, *b, mm_tn(self.value(*a), g));
            }
            Op::MatMulNt(a, b) => {
                acc(grads, *a, mm(g, self.value(*b)));
                acc(grads, *b, mm_tn(g, self.value(*a)));
            }
            Op::Add(a, b) => {
                acc_ref(grads, *a, g);
                acc_ref(grads, *b, g);
            }
            Op::AddRow(x, bias) => {
                acc_ref(grads, *x, g);
                let mut db = Array::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(grads, *bias, db);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
                let db = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
                acc(grads, *a, Array::from_vec(g.rows(), g.cols(), da).unwrap());
                acc(grads, *b, Array::from_vec(g.rows(), g.cols(), db).unwrap());
            }
            Op::MulCol(col, x) => {
                let (c, a) = (self.value(*col), self.value(*x));
                let mut dc = Array::zeros(c.rows(), 1);
                let mut dx = g.clone();
                for r in 0..g.rows() {
                    dc.data_mut()[r] = g.row(r).iter().zip(a.row(r)).map(|(p, q)| p * q).sum();
                    let s = c.get(r, 0);
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                acc(grads, *col, dc);
                acc(grads, *x, dx);
            }
            Op::Scale(x, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                acc(grads, *x, d);
            }
            Op::Gather(table, idx) => {
                let t = self.value(*table);
                let slot = grads[table.0].get_or_insert_with(|| Array::zeros(t.rows(), t.cols()));
                for (k, &r) in idx.iter().enumerate() {
                    for (d, v) in slot.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
            }
            Op::ScatterAdd(x, idx) => {
                let a = self.value(*x);
                let mut dx = Array::zeros(a.rows(), a.cols());
                for (p, &r) in idx.iter().enumerate() {
                    dx.row_mut(p).copy_from_slice(g.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gm = self.value(*gamma);
                let d = g.cols();
                let mut dgamma = Array::zeros(1, d);
                let mut dbeta = Array::zeros(1, d);
                let mut dx = Array::zeros(g.rows(), d);
                let mut dxhat = vec![0.0; d];
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..d {
                        dgamma.data_mut()[c] += gr[c] * hr[c];
                        dbeta.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * gm.data()[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * hr[c];
                    }
                    let k = inv_std[r] / d as f64;
                    for c in 0..d {
                        dx.set(r, c, k * (d as f64 * dxhat[c] - s1 - hr[c] * s2));
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let a = self.value(*x);
                let d = g.data().iter().zip(a.data()).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                acc(grads, *x, Array::from_vec(g.rows(), g.cols(), d).unwrap());
            }
            Op::LeakyRelu(x, slope) => {
                let a = self.value(*x);
                let d = g.data().iter().zip(a.data()).map(|(gv, &xv)| if xv > 0.0 { *gv } else { slope * gv }).collect();
                acc(grads, *x, Array::from_vec(g.rows(), g.cols(), d).unwrap());
            }
            Op::Softmax(x, axis) => {
                let mut dx = Array::zeros(g.rows(), g.cols());
                match axis {
                    Axis::Cols => {
                        for r in 0..g.rows() {
                            let (yr, gr) = (out.row(r), g.row(r));
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for c in 0..g.cols() {
                                dx.set(r, c, yr[c] * (gr[c] - dot));
                            }
                        }
                    }
                    Axis::Rows => {
                        for c in 0..g.cols() {
                            let dot: f64 = (0..g.rows()).map(|r| out.get(r, c) * g.get(r, c)).sum();
                            for r in 0..g.rows() {
                                dx.set(r, c, out.get(r, c) * (g.get(r, c) - dot));
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SegmentSoftmax(x, group) => {
                let n_groups = group.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_groups];
                for (r, &gi) in group.iter().enumerate() {
                    dot[gi] += out.data()[r] * g.data()[r];
                }
                let d = group.iter().enumerate().map(|(r, &gi)| out.data()[r] * (g.data()[r] - dot[gi])).collect();
                acc(grads, *x, Array::from_vec(g.rows(), 1, d).unwrap());
            }
            Op::Concat(xs, axis) => {
                let mut off = 0;
                for &v in xs {
                    let s = self.shape(v);
                    let part = match axis {
                        Axis::Cols => {
                            let mut p = Array::zeros(s[0], s[1]);
                            for r in 0..s[0] {
                                p.row_mut(r).copy_from_slice(&g.row(r)[off..off + s[1]]);
                            }
                            off += s[1];
                            p
                        }
                        Axis::Rows => {
                            let p = Array::from_vec(s[0], s[1], g.data()[off * s[1]..(off + s[0]) * s[1]].to_vec())
                                .unwrap();
                            off += s[0];
                            p
                        }
                    };
                    acc(grads, v, part);
                }
            }
            Op::Slice(x, axis, start) => {
                let s = self.shape(*x);
                let slot = grads[x.0].get_or_insert_with(|| Array::zeros(s[0], s[1]));
                match axis {
                    Axis::Rows => {
                        let off = start * s[1];
                        for (d, v) in slot.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                            *d += v;
                        }
                    }
                    Axis::Cols => {
                        for r in 0..s[0] {
                            for (d, v) in slot.row_mut(r)[*start..start + g.cols()].iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, coef, probs } => {
                let up = g.item();
                let mut d = Array::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    if coef[r] == 0.0 {
                        continue;
                    }
                    let k = up * coef[r];
                    for (dv, pv) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *dv = k * pv;
                    }
                    let t = targets[r];
                    d.set(r, t, d.get(r, t) - k);
                }
                acc(grads, *logits, d);
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                acc(grads, *x, Array::full(s[0], s[1], g.item()));
            }
        }
    }
}

fn acc(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_ref(grads: &mut [Option<Array>], v: Var, g: &Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Array {
        Array::row_vector(v.to_vec())
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(row(&[0.0, 0.0, 0.0]));
        let y = t.softmax(x, Axis::Cols).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.input(Array::from_vec(2, 3, vec![1000.0, -5.0, 3.0, 0.1, 0.2, 0.3]).unwrap());
        for axis in [Axis::Cols, Axis::Rows] {
            let y = t.softmax(x, axis).unwrap();
            let v = t.value(y);
            assert!(v.data().iter().all(|&p| p >= 0.0 && p.is_finite()));
        }
    }

    #[test]
    fn cross_entropy_limits() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let mut logits = Array::zeros(2, 5);
        logits.set(0, 3, 1e4);
        logits.set(1, 1, 1e4);
        let l = t.input(logits);
        let ce = t.cross_entropy(l, &[3, 1], &[true, true], &[1.0, 1.0]).unwrap();
        assert!(t.value(ce).item().abs() < 1e-12);
        let u = t.input(Array::zeros(3, 7));
        let ce = t.cross_entropy(u, &[0, 4, 6], &[true, false, true], &[1.0, 1.0, 1.0]).unwrap();
        assert!((t.value(ce).item() - 7f64.ln()).abs() < 1e-9);
        let ce = t.cross_entropy(u, &[0, 4, 6], &[false; 3], &[1.0; 3]).unwrap();
        assert_eq!(t.value(ce).item(), 0.0);
    }

    #[test]
    fn leaky_relu_and_gelu_values() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(row(&[-1.0, 2.0]));
        let y = t.leaky_relu(x, 0.01).unwrap();
        assert_eq!(t.value(y).data(), &[-0.01, 2.0]);
        let expected = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert!((gelu(1.0) - expected).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn linear_gradient_is_input_broadcast() {
        let mut store = ParamStore::new();
        let w = store.add("w", Array::from_vec(2, 3, vec![0.3; 6]).unwrap()).unwrap();
        let unused = store.add("u", Array::scalar(1.0)).unwrap();
        let mut t = Tape::new(&store);
        let x = t.input(row(&[1.5, -2.0]));
        let wv = t.param(w);
        let y = t.matmul(x, wv).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        let gw = g.param(w).unwrap();
        for c in 0..3 {
            assert_eq!(gw.get(0, c), 1.5);
            assert_eq!(gw.get(1, c), -2.0);
        }
        assert!(g.param(unused).is_none());
        drop(t);
        g.accumulate_into(&mut store, 1.0);
        assert_eq!(store.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn errors() {
        let store = ParamStore::new();
        let t = Tape::new(&store);
        assert!(matches!(t.backward(Var(0)), Err(Error::State(_))));
        let mut t = Tape::new(&store);
        let a = t.input(Array::zeros(2, 3));
        let b = t.input(Array::zeros(2, 3));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        let mut t = Tape::new(&store).with_check(true);
        let a = t.input(row(&[f64::NAN]));
        assert!(matches!(t.scale(a, 1.0), Err(Error::Numerical(_))));
    }
}
