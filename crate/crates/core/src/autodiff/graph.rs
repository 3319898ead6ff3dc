//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its backward rule. Nodes only ever refer to earlier
//! nodes, so the tape is topologically ordered by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Row-wise operations (softmax, batch-norm, bias addition, ...) act on the
//! last axis and treat all leading axes as rows.

use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Elu,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Elu => elu(v),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Elu => {
                if y > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

enum Op {
    Input,
    Param,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        act: Activation,
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Activation),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ScaleRows(Var, Var),
    WeightedSum {
        terms: Vec<Var>,
        weights: Var,
        cols: Vec<usize>,
    },
    Sum(Var),
    SumSquares(Var),
    SqDiffSum(Var, Tensor),
    StraightThrough(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics computed by a training-mode batch-norm, returned so
/// the caller can update running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased per-feature variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf (input or parameter); `None` when the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let parents_finite = self.parents(&op).iter().all(|p| self.value(*p).is_finite());
            assert!(
                !parents_finite,
                "non-finite output from finite inputs at node {}",
                self.nodes.len()
            );
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Param => vec![],
            Op::Dense { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Unary(x, _)
            | Op::Softplus(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::GatherRows(x, _)
            | Op::ScatterAddRows(x, _)
            | Op::SliceCols { x, .. }
            | Op::Sum(x)
            | Op::SumSquares(x)
            | Op::SqDiffSum(x, _)
            | Op::StraightThrough(x)
            | Op::Reshape(x) => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(xs) => xs.clone(),
            Op::WeightedSum { terms, weights, .. } => {
                let mut v = terms.clone();
                v.push(*weights);
                v
            }
        }
    }

    /// A constant leaf. Gradients with respect to it are still reported.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// The parameter's current value as a leaf; repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn out_shape(&self, x: Var, cols: usize) -> Vec<usize> {
        let mut shape = self.shape(x).to_vec();
        match shape.last_mut() {
            Some(last) => *last = cols,
            None => shape.push(cols),
        }
        shape
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a);
        if self.shape(b).len() != 2 || self.shape(b)[0] != k {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let n = self.shape(b)[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let shape = self.out_shape(a, n);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b)))
    }

    /// `act(x @ w + b)` as one node; only the output is kept.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>, act: Activation) -> Result<Var> {
        let (m, k) = self.matrix_dims(x);
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear", self.shape(x), ws));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("linear bias", self.shape(w), self.shape(b)));
            }
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 0.0);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        if act != Activation::Identity {
            out.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        let shape = self.out_shape(x, n);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dense { x, w, b, act }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.dense(x, w, Some(b), Activation::Identity)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(elu);
        self.push(out, Op::Unary(x, Activation::Elu))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Unary(x, Activation::Sigmoid))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let k = out.cols();
        for row in out.data_mut().chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let k = out.cols();
        for row in out.data_mut().chunks_exact_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Batch normalisation over rows. With `stats = None` the batch's own
    /// statistics are used (training) and returned; otherwise the supplied
    /// `(mean, var)` are used (evaluation).
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (rows, f) = self.matrix_dims(x);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape("batchnorm", self.shape(x), self.shape(gamma)));
        }
        let (mean, var, batch) = match stats {
            Some((m, v)) => {
                if m.len() != f || v.len() != f {
                    return Err(Error::shape("batchnorm stats", &[f], &[m.len(), v.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if rows < 2 {
                    return Err(Error::InvalidBatch {
                        op: "batchnorm",
                        reason: format!("training mode needs at least 2 rows, got {rows}"),
                    });
                }
                let xd = self.value(x).data();
                let mut mean = vec![0.0; f];
                for row in xd.chunks_exact(f) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; f];
                for row in xd.chunks_exact(f) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: rows,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = self.value(x).clone();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for row in out.data_mut().chunks_exact_mut(f) {
            for c in 0..f {
                row[c] = (row[c] - mean[c]) * inv_std[c] * g[c] + b[c];
            }
        }
        let var_node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: batch.is_some(),
            },
        );
        Ok((var_node, batch))
    }

    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x);
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("gather index {bad} out of {rows} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[index.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows(x, index)))
    }

    /// `out[index[r]] += x[r]` into `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: Rc<[usize]>, out_rows: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x);
        if index.len() != rows {
            return Err(Error::shape("scatter_add_rows", self.shape(x), &[index.len()]));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Contract(format!("scatter index {bad} out of {out_rows} rows")));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; out_rows * c];
        for (r, &i) in index.iter().enumerate() {
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(&src[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        let t = Tensor::new(&[out_rows, c], out)?;
        Ok(self.push(t, Op::ScatterAddRows(x, index)))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        if let Some(bad) = xs.iter().find(|v| self.value(**v).rows() != rows) {
            return Err(Error::shape("concat_cols", self.shape(xs[0]), self.shape(*bad)));
        }
        let widths: Vec<usize> = xs.iter().map(|v| self.value(*v).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in xs {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let shape = self.out_shape(xs[0], total);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let shape = self.out_shape(x, len);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceCols { x, start }))
    }

    /// Multiplies row `r` of `x` by `s[r]`; `s` holds one value per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x);
        if self.value(s).len() != rows {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let mut out = self.value(x).clone();
        let sd = self.value(s).data().to_vec();
        for (row, sv) in out.data_mut().chunks_exact_mut(c).zip(sd) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        Ok(self.push(out, Op::ScaleRows(x, s)))
    }

    /// `Σ_t terms[t] * weights[:, cols[t]]`, each weight column broadcast
    /// across the row.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: Var, cols: &[usize]) -> Result<Var> {
        if terms.is_empty() || terms.len() != cols.len() {
            return Err(Error::Contract("weighted_sum needs one column per term".into()));
        }
        let shape = self.shape(terms[0]).to_vec();
        let (rows, c) = self.matrix_dims(terms[0]);
        let (wr, wc) = self.matrix_dims(weights);
        if wr != rows {
            return Err(Error::shape("weighted_sum", &shape, self.shape(weights)));
        }
        if let Some(bad) = cols.iter().find(|&&k| k >= wc) {
            return Err(Error::Contract(format!("weight column {bad} out of {wc}")));
        }
        let mut out = vec![0.0; rows * c];
        let wd = self.value(weights).data();
        for (t, &k) in terms.iter().zip(cols) {
            if self.shape(*t) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(*t)));
            }
            let td = self.value(*t).data();
            for r in 0..rows {
                let w = wd[r * wc + k];
                if w == 0.0 {
                    continue;
                }
                for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(&td[r * c..(r + 1) * c]) {
                    *o += w * v;
                }
            }
        }
        let node = Op::WeightedSum {
            terms: terms.to_vec(),
            weights,
            cols: cols.to_vec(),
        };
        Ok(self.push(Tensor::new(&shape, out)?, node))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// `Σ (x - target)²` against a constant target.
    pub fn sq_diff_sum(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(Error::shape("sq_diff_sum", self.shape(x), target.shape()));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SqDiffSum(x, target.clone())))
    }

    /// Forward value `hard`, gradient passed straight through to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if self.shape(soft) != hard.shape() {
            return Err(Error::shape("straight_through", self.shape(soft), hard.shape()));
        }
        Ok(self.push(hard, Op::StraightThrough(soft)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added
    /// into `store`; gradients for every leaf are also returned.
    pub fn backward(&self, loss: Var, store: Option<&mut ParameterStore>) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let is_leaf = matches!(node.op, Op::Input | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
        }

        if let Some(store) = store {
            for (id, v) in &self.params {
                if let Some(g) = grads.get(v.0).and_then(Option::as_ref) {
                    store.grad_mut(*id).add_assign(g)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Dense { x, w, b, act } => {
                let (m, k) = self.matrix_dims(*x);
                let n = y.cols();
                let mut dpre = dy.clone();
                if *act != Activation::Identity {
                    for (d, yv) in dpre.data_mut().iter_mut().zip(y.data()) {
                        *d *= act.derivative_from_output(*yv);
                    }
                }
                self.linear_backward(*x, *w, *b, &dpre, m, k, n, grads)?;
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix_dims(*a);
                let n = y.cols();
                self.linear_backward(*a, *b, None, dy, m, k, n, grads)?;
            }
            Op::AddBias(x, b) => {
                accumulate(grads, *x, dy.clone())?;
                accumulate(grads, *b, column_sums(dy))?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.clone())?;
                accumulate(grads, *b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, dy.clone())?;
                accumulate(grads, *b, dy.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = zip_map(dy, bv, |g, v| g * v);
                let db = zip_map(dy, av, |g, v| g * v);
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Scale(x, c) => accumulate(grads, *x, dy.map(|v| v * c))?,
            Op::Unary(x, act) => {
                let dx = zip_map(dy, y, |g, yv| g * act.derivative_from_output(yv));
                accumulate(grads, *x, dx)?;
            }
            Op::Softplus(x) => {
                let dx = zip_map(dy, self.value(*x), |g, xv| g * sigmoid(xv));
                accumulate(grads, *x, dx)?;
            }
            Op::Softmax(x) => {
                let k = y.cols();
                let mut dx = dy.clone();
                for (drow, yrow) in dx.data_mut().chunks_exact_mut(k).zip(y.data().chunks_exact(k)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                    for (d, p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::LogSoftmax(x) => {
                let k = y.cols();
                let mut dx = dy.clone();
                for (drow, yrow) in dx.data_mut().chunks_exact_mut(k).zip(y.data().chunks_exact(k)) {
                    let total: f64 = drow.iter().sum();
                    for (d, ly) in drow.iter_mut().zip(yrow) {
                        *d -= ly.exp() * total;
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gamma).data();
                let (rows, f) = (xv.rows(), xv.cols());
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let xhat = |r: usize, c: usize| (xv.data()[r * f + c] - mean[c]) * inv_std[c];
                for r in 0..rows {
                    for c in 0..f {
                        let d = dy.data()[r * f + c];
                        dgamma[c] += d * xhat(r, c);
                        dbeta[c] += d;
                    }
                }
                let mut dx = vec![0.0; rows * f];
                if *batch_stats {
                    // dxhat = dy * gamma; Σ dxhat = gamma Σ dy, Σ dxhat·xhat = gamma dgamma
                    let n = rows as f64;
                    for r in 0..rows {
                        for c in 0..f {
                            let dxhat = dy.data()[r * f + c] * g[c];
                            dx[r * f + c] = inv_std[c] / n
                                * (n * dxhat - g[c] * dbeta[c] - xhat(r, c) * g[c] * dgamma[c]);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for c in 0..f {
                            dx[r * f + c] = dy.data()[r * f + c] * g[c] * inv_std[c];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?)?;
                accumulate(grads, *gamma, Tensor::new(&[f], dgamma)?)?;
                accumulate(grads, *beta, Tensor::new(&[f], dbeta)?)?;
            }
            Op::GatherRows(x, index) => {
                let (rows, c) = self.matrix_dims(*x);
                let mut dx = vec![0.0; rows * c];
                for (r, &i) in index.iter().enumerate() {
                    for (o, g) in dx[i * c..(i + 1) * c].iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
            }
            Op::ScatterAddRows(x, index) => {
                let c = dy.cols();
                let mut dx = Vec::with_capacity(index.len() * c);
                for &i in index.iter() {
                    dx.extend_from_slice(dy.row(i));
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
            }
            Op::ConcatCols(xs) => {
                let rows = dy.rows();
                let mut offset = 0;
                for v in xs {
                    let c = self.value(*v).cols();
                    let mut dx = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dx.extend_from_slice(&dy.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(grads, *v, Tensor::new(self.shape(*v), dx)?)?;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, c) = self.matrix_dims(*x);
                let len = dy.cols();
                let mut dx = vec![0.0; rows * c];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len].copy_from_slice(dy.row(r));
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let c = xv.cols();
                let mut dx = dy.clone();
                let mut ds = vec![0.0; sv.len()];
                for (r, drow) in dx.data_mut().chunks_exact_mut(c).enumerate() {
                    ds[r] = drow.iter().zip(xv.row(r)).map(|(g, v)| g * v).sum();
                    drow.iter_mut().for_each(|g| *g *= sv.data()[r]);
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *s, Tensor::new(sv.shape(), ds)?)?;
            }
            Op::WeightedSum { terms, weights, cols } => {
                let wv = self.value(*weights);
                let (rows, wc) = (wv.rows(), wv.cols());
                let c = dy.cols();
                let mut dw = vec![0.0; wv.len()];
                for (t, &k) in terms.iter().zip(cols) {
                    let tv = self.value(*t);
                    let mut dt = vec![0.0; rows * c];
                    for r in 0..rows {
                        let w = wv.data()[r * wc + k];
                        let grow = dy.row(r);
                        dw[r * wc + k] += grow.iter().zip(tv.row(r)).map(|(g, v)| g * v).sum::<f64>();
                        for (o, g) in dt[r * c..(r + 1) * c].iter_mut().zip(grow) {
                            *o = w * g;
                        }
                    }
                    accumulate(grads, *t, Tensor::new(tv.shape(), dt)?)?;
                }
                accumulate(grads, *weights, Tensor::new(wv.shape(), dw)?)?;
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                accumulate(grads, *x, Tensor::full(self.shape(*x), g))?;
            }
            Op::SumSquares(x) => {
                let g = dy.data()[0];
                accumulate(grads, *x, self.value(*x).map(|v| 2.0 * g * v))?;
            }
            Op::SqDiffSum(x, target) => {
                let g = dy.data()[0];
                let dx = zip_map(self.value(*x), target, |a, b| 2.0 * g * (a - b));
                accumulate(grads, *x, dx)?;
            }
            Op::StraightThrough(soft) => accumulate(grads, *soft, dy.clone())?,
            Op::Reshape(x) => {
                let dx = dy.clone().reshape(self.shape(*x))?;
                accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dpre: &Tensor,
        m: usize,
        k: usize,
        n: usize,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut dw = vec![0.0; k * n];
        gemm(k, m, n, self.value(x).data(), true, dpre.data(), false, &mut dw, 0.0);
        let mut dx = vec![0.0; m * k];
        gemm(m, n, k, dpre.data(), false, self.value(w).data(), true, &mut dx, 0.0);
        accumulate(grads, x, Tensor::new(self.shape(x), dx)?)?;
        accumulate(grads, w, Tensor::new(self.shape(w), dw)?)?;
        if let Some(b) = b {
            accumulate(grads, b, column_sums(dpre))?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("same length")
}

fn column_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for row in t.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[c], out).expect("column count")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::ParamKind;
    use approx::assert_relative_eq;

    #[test]
    fn linear_identity_and_arithmetic() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = g.input(Tensor::identity(2));
        let b = g.input(Tensor::zeros(&[2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.input(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let w = g.input(Tensor::from_rows(&[vec![2.0, 3.0], vec![5.0, 7.0]]).unwrap());
        let b = g.input(Tensor::ones(&[2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3]));
        let w = g.input(Tensor::zeros(&[2, 2]));
        let b = g.input(Tensor::zeros(&[2]));
        let err = g.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn elu_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = g.elu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert_relative_eq!(v[2], (-1.0f64).exp() - 1.0, max_relative = 1e-15);
        assert_relative_eq!(v[2], -0.6321, epsilon = 1e-4);
    }

    #[test]
    fn softmax_values_and_stability() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap());
        let y = g.softmax(x);
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert_eq!(v[2], 1.0);
        assert!(v[3] >= 0.0 && v[3] < 1e-300);
    }

    #[test]
    fn sigmoid_limits() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[3], vec![0.0, 800.0, -800.0]).unwrap());
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5, 1.0, 0.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_uses_stats() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, -2.0], vec![5.0, 4.0]]).unwrap());
        let gamma = g.input(Tensor::ones(&[2]));
        let beta = g.input(Tensor::zeros(&[2]));
        let (y, stats) = g.batchnorm(x, gamma, beta, None, 1e-5).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![3.0, 4.0]);
        let yv = g.value(y);
        for c in 0..2 {
            let col: Vec<f64> = (0..3).map(|r| yv.row(r)[c]).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }

        let m = [2.0, -1.0];
        let v = [4.0, 0.5];
        let x = g.input(Tensor::from_rows(&[m.to_vec()]).unwrap());
        let (y, none) = g.batchnorm(x, gamma, beta, Some((&m, &v)), 1e-5).unwrap();
        assert!(none.is_none());
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        let gamma = g.input(Tensor::ones(&[2]));
        let beta = g.input(Tensor::zeros(&[2]));
        assert!(matches!(
            g.batchnorm(x, gamma, beta, None, 1e-5),
            Err(Error::InvalidBatch { .. })
        ));
    }

    #[test]
    fn backward_sum_of_param_gives_ones() {
        let mut store = ParameterStore::new();
        let p = store.add("p", ParamKind::Weight, Tensor::full(&[2, 3], 0.7)).unwrap();
        let q = store.add("q", ParamKind::Weight, Tensor::full(&[2], 1.0)).unwrap();
        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let _unused = g.param(&store, q);
        let loss = g.sum(pv);
        g.backward(loss, Some(&mut store)).unwrap();
        assert_eq!(store.grad(p), &Tensor::ones(&[2, 3]));
        assert_eq!(store.grad(q), &Tensor::zeros(&[2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        let y = g.elu(x);
        assert!(matches!(g.backward(y, None), Err(Error::Contract(_))));
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParameterStore::new();
        let p = store.add("p", ParamKind::Bias, Tensor::ones(&[3])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        g.backward(loss, Some(&mut store)).unwrap();
        assert_eq!(store.grad(p).data(), &[2.0, 2.0, 2.0]);
    }
}
