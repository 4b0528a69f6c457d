//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as a node on a tape; parameters are
//! borrowed from a [`ParamStore`] and never copied. [`Graph::backward`]
//! walks the tape in reverse and returns one gradient per parameter.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{self, matmul_acc, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect()
    }

    /// Adds `scale * direction` to every parameter.
    pub fn axpy(&mut self, scale: f64, direction: &[Matrix]) {
        for (p, d) in self.values.iter_mut().zip(direction) {
            for (a, b) in p.data.iter_mut().zip(&d.data) {
                *a += scale * b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Softplus,
    Abs,
    Square,
    Sqrt,
    Recip,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => tensor::sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Softplus => tensor::softplus(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Softplus => tensor::sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Max(Var, Var),
    Min(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    SumCols(Var),
    NormalizeRows(Var, f64),
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(1024), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), g)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_nt(self.value(a), self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulNT(a, b), g)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self.value(a).zip_map(self.value(b), f);
        let g = self.needs(a) || self.needs(b);
        self.push(out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Max(a, b), f64::max)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a, b), f64::min)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!((rm.rows, rm.cols), (1, am.cols), "add_row expects a 1 x cols bias");
        let mut out = am.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rm.data) {
                *o += b;
            }
        }
        let g = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), g)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!((cm.rows, cm.cols), (am.rows, 1), "mul_col expects rows x 1");
        let mut out = am.clone();
        for r in 0..out.rows {
            let s = cm.data[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let g = self.needs(a) || self.needs(col);
        self.push(out, Op::MulCol(a, col), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let g = self.needs(a);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let g = self.needs(a);
        self.push(out, Op::AddScalar(a), g)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).map(|x| f.apply(x));
        let g = self.needs(a);
        self.push(out, Op::Unary(a, f), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice out of range");
        let mut out = Matrix::zeros(m.rows, len);
        for r in 0..m.rows {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let g = self.needs(a);
        self.push(out, Op::SliceCols(a, start), g)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        let g = self.needs(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), g)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows, idx.len());
        for r in 0..m.rows {
            let src = m.row(r);
            for (o, &c) in out.row_mut(r).iter_mut().zip(idx) {
                *o = src[c];
            }
        }
        let g = self.needs(a);
        self.push(out, Op::GatherCols(a, idx.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Row-wise softmax. Masked-out columns get zero weight; a row with no
    /// admissible column is all zeros.
    pub fn softmax_rows(&mut self, a: Var, column_mask: Option<&[bool]>) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            let row = m.row(r);
            let allowed = |c: usize| column_mask.is_none_or(|mask| mask[c]);
            let max = (0..m.cols).filter(|&c| allowed(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..row.len() {
                if allowed(c) {
                    o[c] = (row[c] - max).exp();
                    sum += o[c];
                }
            }
            for x in o.iter_mut() {
                *x /= sum;
            }
        }
        let g = self.needs(a);
        self.push(out, Op::Softmax(a), g)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..m.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let g = self.needs(a);
        self.push(out, Op::LogSoftmax(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let g = self.needs(a);
        self.push(Matrix::scalar(s), Op::SumAll(a), g)
    }

    /// Sums each row, giving `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(m.rows, 1, data);
        let g = self.needs(a);
        self.push(out, Op::SumCols(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Divides each row by `max(||row||, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..m.rows {
            let n = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            for x in out.row_mut(r) {
                *x /= n;
            }
        }
        let g = self.needs(a);
        self.push(out, Op::NormalizeRows(a, eps), g)
    }

    /// Reverse pass from a scalar node. Returns one gradient per parameter
    /// (zeros for parameters that did not take part).
    pub fn backward(&self, loss: Var) -> Vec<Matrix> {
        let mut out = self.params.zeros_like();
        self.backward_into(loss, 1.0, &mut out);
        out
    }

    /// Accumulates `scale * d loss / d param` into `acc`.
    pub fn backward_into(&self, loss: Var, scale: f64, acc: &mut [Matrix]) {
        assert_eq!(self.value(loss).data.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(scale));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].grad {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        acc[id.0].add_assign(&gout);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let mut ga = Matrix::zeros(self.value(*a).rows, self.value(*a).cols);
                        matmul_acc(&gout, false, self.value(*b), true, &mut ga);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(self.value(*b).rows, self.value(*b).cols);
                        matmul_acc(self.value(*a), true, &gout, false, &mut gb);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.needs(*a) {
                        let mut ga = Matrix::zeros(self.value(*a).rows, self.value(*a).cols);
                        matmul_acc(&gout, false, self.value(*b), false, &mut ga);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(self.value(*b).rows, self.value(*b).cols);
                        matmul_acc(&gout, true, self.value(*a), false, &mut gb);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gout.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gout);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gout.map(|x| -x));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gout);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gout.zip_map(bv, |g, y| g / y));
                    }
                    if self.needs(*b) {
                        let out = self.value(Var(i));
                        let t = gout.zip_map(out, |g, o| g * o);
                        accumulate(&mut grads, *b, t.zip_map(bv, |t, y| -t / y));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut gr = Matrix::zeros(1, gout.cols);
                        for r in 0..gout.rows {
                            for (acc, g) in gr.data.iter_mut().zip(gout.row(r)) {
                                *acc += g;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gout);
                    }
                }
                Op::MulCol(a, col) => {
                    let (am, cm) = (self.value(*a), self.value(*col));
                    if self.needs(*col) {
                        let data = (0..am.rows)
                            .map(|r| am.row(r).iter().zip(gout.row(r)).map(|(x, g)| x * g).sum())
                            .collect();
                        accumulate(&mut grads, *col, Matrix::from_vec(am.rows, 1, data));
                    }
                    if self.needs(*a) {
                        let mut ga = gout;
                        for r in 0..ga.rows {
                            let s = cm.data[r];
                            for x in ga.row_mut(r) {
                                *x *= s;
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, gout.map(|g| g * s));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, gout),
                Op::Unary(a, f) => {
                    let (x, y) = (self.value(*a), self.value(Var(i)));
                    let mut ga = gout;
                    for ((g, &xv), &yv) in ga.data.iter_mut().zip(&x.data).zip(&y.data) {
                        *g *= f.derivative(xv, yv);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let is_max = matches!(node.op, Op::Max(..));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(gout.rows, gout.cols);
                    let mut gb = Matrix::zeros(gout.rows, gout.cols);
                    for k in 0..gout.data.len() {
                        let pick_a = if is_max { av.data[k] >= bv.data[k] } else { av.data[k] <= bv.data[k] };
                        if pick_a {
                            ga.data[k] = gout.data[k];
                        } else {
                            gb.data[k] = gout.data[k];
                        }
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        if self.needs(p) {
                            let mut gp = Matrix::zeros(gout.rows, pc);
                            for r in 0..gout.rows {
                                gp.row_mut(r).copy_from_slice(&gout.row(r)[offset..offset + pc]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pr = self.value(p).rows;
                        if self.needs(p) {
                            let data = gout.data[offset * gout.cols..(offset + pr) * gout.cols].to_vec();
                            accumulate(&mut grads, p, Matrix::from_vec(pr, gout.cols, data));
                        }
                        offset += pr;
                    }
                }
                Op::SliceCols(a, start) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows, am.cols);
                    for r in 0..gout.rows {
                        ga.row_mut(r)[*start..*start + gout.cols].copy_from_slice(gout.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows, am.cols);
                    for (k, &r) in idx.iter().enumerate() {
                        for (x, g) in ga.row_mut(r).iter_mut().zip(gout.row(k)) {
                            *x += g;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows, am.cols);
                    for r in 0..gout.rows {
                        let dst = ga.row_mut(r);
                        for (&c, g) in idx.iter().zip(gout.row(r)) {
                            dst[c] += g;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), gout.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, x) in ga.row_mut(r).iter_mut().enumerate() {
                            *x = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), gout.row(r));
                        let gsum: f64 = gr.iter().sum();
                        for (c, x) in ga.row_mut(r).iter_mut().enumerate() {
                            *x = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, gout.data[0]));
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let g = gout.data[r];
                        for x in ga.row_mut(r) {
                            *x = g;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = self.value(*a);
                    let y = self.value(Var(i));
                    let mut ga = Matrix::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = gout.row(r);
                        let out = ga.row_mut(r);
                        if n <= *eps {
                            for (o, g) in out.iter_mut().zip(gr) {
                                *o = g / eps;
                            }
                        } else {
                            let dot: f64 = y.row(r).iter().zip(gr).map(|(a, b)| a * b).sum();
                            for (c, o) in out.iter_mut().enumerate() {
                                *o = (gr[c] - y.row(r)[c] * dot) / n;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
