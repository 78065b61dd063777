//! Reverse-mode gradient tape over rank-2 arrays.
//!
//! Each recorded node stores its forward value and the primitive that
//! produced it. `backward` walks the nodes in reverse and accumulates
//! gradients only along paths that reach a parameter.

use super::array::{kernels, log_softmax_in_place, softmax_in_place, Array};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// Tanh-form GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
}

struct Node {
    op: Op,
    value: Array,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that leads to a parameter.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, a: &Array) -> Result<()> {
    if a.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Forward value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Array, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Var {
        let needs_grad = inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        let value = evaluate(&op, |v| &self.nodes[v.0].value);
        self.push(op, value, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        rank2("matmul", x)?;
        rank2("matmul", y)?;
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", x, y));
        }
        Ok(self.record(Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        rank2("transpose", self.value(a))?;
        Ok(self.record(Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.record(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.record(Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.record(Op::Mul(a, b)))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` array.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        rank2("add_row", x)?;
        if r.shape() != [1, x.cols()] {
            return Err(shape_err("add_row", x, r));
        }
        Ok(self.record(Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::Scale(a, c))
    }

    /// Multiplies an array by a single-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("scale_by", self.value(a), sv));
        }
        Ok(self.record(Op::ScaleBy(a, s)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.record(Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        rank2("softmax_rows", self.value(a))?;
        Ok(self.record(Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        rank2("log_softmax_rows", self.value(a))?;
        Ok(self.record(Op::LogSoftmaxRows(a)))
    }

    /// Per-row standardization (no affine parameters).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        rank2("layer_norm_rows", self.value(a))?;
        Ok(self.record(Op::LayerNormRows(a, eps)))
    }

    /// Scales each row to unit Euclidean norm. Rows with norm ≤ 1e-12 are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        rank2("normalize_rows", x)?;
        for r in 0..x.rows() {
            let n = row_norm(x.row_slice(r));
            if n <= 1e-12 {
                return Err(Error::Collapsed(format!("row {r} has norm {n:e}")));
            }
        }
        Ok(self.record(Op::NormalizeRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.record(Op::Mean(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        for p in parts {
            let v = self.value(*p);
            rank2("concat_rows", v)?;
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), v));
            }
        }
        Ok(self.record(Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        rank2("slice_rows", x)?;
        if start >= end || end > x.rows() {
            return Err(Error::invalid(format!("row range {start}..{end} of {:?}", x.shape())));
        }
        Ok(self.record(Op::SliceRows(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            rank2("concat_cols", v)?;
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
        }
        Ok(self.record(Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        rank2("slice_cols", x)?;
        if start >= end || end > x.cols() {
            return Err(Error::invalid(format!("column range {start}..{end} of {:?}", x.shape())));
        }
        Ok(self.record(Op::SliceCols(a, start, end)))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        rank2("gather_cols", x)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= x.cols()) {
            return Err(Error::invalid(format!("column indices {idx:?} for {:?}", x.shape())));
        }
        Ok(self.record(Op::GatherCols(a, idx.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        rank2("gather_rows", x)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= x.rows()) {
            return Err(Error::invalid(format!("row indices {idx:?} for {:?}", x.shape())));
        }
        Ok(self.record(Op::GatherRows(a, idx.to_vec())))
    }

    /// Recomputes every node from the leaves.
    pub fn replay(&self) -> Vec<Array> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, |v| &values[v.0]),
            };
            values.push(v);
        }
        values
    }

    /// Gradient of the single-element node `loss` with respect to every node
    /// on a path to a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Array| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::matmul_nt(g.data(), y.data(), &mut d, m, n, k);
                    acc(*a, Array::from_parts(vec![m, k], d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::matmul_tn(x.data(), g.data(), &mut d, m, k, n);
                    acc(*b, Array::from_parts(vec![k, n], d));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    acc(*a, g.transpose().expect("rank-2 gradient"));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, hadamard(g, val(*b)));
                }
                if self.wants(*b) {
                    acc(*b, hadamard(g, val(*a)));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*row) {
                    let cols = g.cols();
                    let mut d = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (o, v) in d.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    acc(*row, Array::from_parts(vec![1, cols], d));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    acc(*a, g.scale(*c));
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = val(*s).data()[0];
                if self.wants(*a) {
                    acc(*a, g.scale(sv));
                }
                if self.wants(*s) {
                    let dot = g.data().iter().zip(val(*a).data()).fold(0.0, |t, (x, y)| t + x * y);
                    acc(*s, Array::from_parts(val(*s).shape().to_vec(), vec![dot]));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let d = val(*a).zip_map(g, "gelu", |x, gy| gy * gelu_grad(x)).expect("same shape");
                    acc(*a, d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dot = yr.iter().zip(gr).fold(0.0, |t, (p, q)| t + p * q);
                        let c = y.cols();
                        for j in 0..c {
                            d[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, Array::from_parts(y.shape().to_vec(), d));
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let total = gr.iter().fold(0.0, |t, v| t + v);
                        for j in 0..c {
                            d[r * c + j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    acc(*a, Array::from_parts(y.shape().to_vec(), d));
                }
            }
            Op::LayerNormRows(a, eps) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let y = &node.value;
                    let c = x.cols();
                    let mut d = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let (_, var) = mean_var(x.row_slice(r));
                        let inv = 1.0 / (var + eps).sqrt();
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let gm = gr.iter().fold(0.0, |t, v| t + v) / c as f64;
                        let gym = gr.iter().zip(yr).fold(0.0, |t, (p, q)| t + p * q) / c as f64;
                        for j in 0..c {
                            d[r * c + j] = inv * (gr[j] - gm - yr[j] * gym);
                        }
                    }
                    acc(*a, Array::from_parts(x.shape().to_vec(), d));
                }
            }
            Op::NormalizeRows(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let y = &node.value;
                    let c = x.cols();
                    let mut d = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let n = row_norm(x.row_slice(r));
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dot = yr.iter().zip(gr).fold(0.0, |t, (p, q)| t + p * q);
                        for j in 0..c {
                            d[r * c + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                    acc(*a, Array::from_parts(x.shape().to_vec(), d));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    acc(*a, Array::full(val(*a).shape(), g.data()[0]));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    acc(*a, Array::full(x.shape(), g.data()[0] / x.len() as f64));
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    if self.wants(*p) {
                        let d = g.data()[start * c..(start + rows) * c].to_vec();
                        acc(*p, Array::from_parts(vec![rows, c], d));
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start, end) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let c = x.cols();
                    let mut d = vec![0.0; x.len()];
                    d[start * c..end * c].copy_from_slice(g.data());
                    acc(*a, Array::from_parts(x.shape().to_vec(), d));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut start = 0;
                for p in parts {
                    let c = val(*p).cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + start..r * total + start + c]);
                        }
                        acc(*p, Array::from_parts(vec![rows, c], d));
                    }
                    start += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let (rows, c, w) = (x.rows(), x.cols(), end - start);
                    let mut d = vec![0.0; x.len()];
                    for r in 0..rows {
                        d[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    acc(*a, Array::from_parts(x.shape().to_vec(), d));
                }
            }
            Op::GatherCols(a, idx) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let (rows, c, k) = (x.rows(), x.cols(), idx.len());
                    let mut d = vec![0.0; x.len()];
                    for r in 0..rows {
                        for (j, &src) in idx.iter().enumerate() {
                            d[r * c + src] += g.data()[r * k + j];
                        }
                    }
                    acc(*a, Array::from_parts(x.shape().to_vec(), d));
                }
            }
            Op::GatherRows(a, idx) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let c = x.cols();
                    let mut d = vec![0.0; x.len()];
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += g.data()[i * c + j];
                        }
                    }
                    acc(*a, Array::from_parts(x.shape().to_vec(), d));
                }
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::ScaleBy(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Gelu(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::LayerNormRows(a, _)
        | Op::NormalizeRows(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SliceRows(a, _, _)
        | Op::SliceCols(a, _, _)
        | Op::GatherCols(a, _)
        | Op::GatherRows(a, _) => vec![*a],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
    }
}

fn hadamard(a: &Array, b: &Array) -> Array {
    a.zip_map(b, "mul", |x, y| x * y).expect("same shape")
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().fold(0.0, |t, v| t + v * v).sqrt()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().fold(0.0, |t, v| t + v) / n;
    let var = row.iter().fold(0.0, |t, v| t + (v - mean) * (v - mean)) / n;
    (mean, var)
}

/// Forward rule shared by recording and replay. Shapes were validated on record.
fn evaluate<'a>(op: &Op, val: impl Fn(Var) -> &'a Array) -> Array {
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => val(*a).matmul(val(*b)).expect("validated"),
        Op::Transpose(a) => val(*a).transpose().expect("validated"),
        Op::Add(a, b) => val(*a).add(val(*b)).expect("validated"),
        Op::Sub(a, b) => val(*a).sub(val(*b)).expect("validated"),
        Op::Mul(a, b) => hadamard(val(*a), val(*b)),
        Op::AddRow(a, row) => {
            let x = val(*a);
            let r = val(*row).data();
            let c = x.cols();
            let mut d = x.data().to_vec();
            for (i, v) in d.iter_mut().enumerate() {
                *v += r[i % c];
            }
            Array::from_parts(x.shape().to_vec(), d)
        }
        Op::Scale(a, c) => val(*a).scale(*c),
        Op::ScaleBy(a, s) => val(*a).scale(val(*s).data()[0]),
        Op::Gelu(a) => val(*a).map(gelu),
        Op::SoftmaxRows(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut d = x.data().to_vec();
            for chunk in d.chunks_mut(c) {
                softmax_in_place(chunk);
            }
            Array::from_parts(x.shape().to_vec(), d)
        }
        Op::LogSoftmaxRows(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut d = x.data().to_vec();
            for chunk in d.chunks_mut(c) {
                log_softmax_in_place(chunk);
            }
            Array::from_parts(x.shape().to_vec(), d)
        }
        Op::LayerNormRows(a, eps) => {
            let x = val(*a);
            let c = x.cols();
            let mut d = x.data().to_vec();
            for chunk in d.chunks_mut(c) {
                let (mean, var) = mean_var(chunk);
                let inv = 1.0 / (var + eps).sqrt();
                for v in chunk.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            Array::from_parts(x.shape().to_vec(), d)
        }
        Op::NormalizeRows(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut d = x.data().to_vec();
            for chunk in d.chunks_mut(c) {
                let n = row_norm(chunk);
                for v in chunk.iter_mut() {
                    *v /= n;
                }
            }
            Array::from_parts(x.shape().to_vec(), d)
        }
        Op::Sum(a) => Array::scalar(val(*a).sum()),
        Op::Mean(a) => Array::scalar(val(*a).mean()),
        Op::ConcatRows(parts) => {
            let c = val(parts[0]).cols();
            let mut d = Vec::new();
            let mut rows = 0;
            for p in parts {
                let x = val(*p);
                rows += x.rows();
                d.extend_from_slice(x.data());
            }
            Array::from_parts(vec![rows, c], d)
        }
        Op::SliceRows(a, start, end) => {
            let x = val(*a);
            let c = x.cols();
            Array::from_parts(vec![end - start, c], x.data()[start * c..end * c].to_vec())
        }
        Op::ConcatCols(parts) => {
            let rows = val(parts[0]).rows();
            let total: usize = parts.iter().map(|p| val(*p).cols()).sum();
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    d.extend_from_slice(val(*p).row_slice(r));
                }
            }
            Array::from_parts(vec![rows, total], d)
        }
        Op::SliceCols(a, start, end) => {
            let x = val(*a);
            let mut d = Vec::with_capacity(x.rows() * (end - start));
            for r in 0..x.rows() {
                d.extend_from_slice(&x.row_slice(r)[*start..*end]);
            }
            Array::from_parts(vec![x.rows(), end - start], d)
        }
        Op::GatherCols(a, idx) => {
            let x = val(*a);
            let mut d = Vec::with_capacity(x.rows() * idx.len());
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                d.extend(idx.iter().map(|&i| row[i]));
            }
            Array::from_parts(vec![x.rows(), idx.len()], d)
        }
        Op::GatherRows(a, idx) => {
            let x = val(*a);
            let mut d = Vec::with_capacity(idx.len() * x.cols());
            for &i in idx {
                d.extend_from_slice(x.row_slice(i));
            }
            Array::from_parts(vec![idx.len(), x.cols()], d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_of_product_is_ones_times_b_transposed() {
        let mut tape = Tape::new();
        let a = tape.param(Array::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = tape.constant(Array::from_rows(&[&[0.5, -1.0, 2.0], &[1.5, 0.0, 3.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        let ga = grads.get(a).unwrap();
        // ones(2x3) · Bᵀ: each row is the row sums of B.
        assert_eq!(ga.data(), &[1.5, 4.5, 1.5, 4.5]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.param(Array::from_rows(&[&[0.3, -1.2, 2.0], &[1.0, 0.1, -0.4]]).unwrap());
        let w = tape.param(Array::from_rows(&[&[0.2, 0.7], &[-0.5, 0.3], &[1.1, -0.9]]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let h = tape.layer_norm_rows(h, 1e-5).unwrap();
        let p = tape.softmax_rows(h).unwrap();
        let l = tape.mean(p);
        let replayed = tape.replay();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(Var(i)));
        }
        assert_eq!(replayed[l.0].data()[0].to_bits(), tape.scalar(l).to_bits());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Array::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = tape.param(Array::zeros(&[1, 3]));
        assert!(matches!(tape.normalize_rows(x), Err(Error::Collapsed(_))));
    }

    #[test]
    fn shape_errors_surface() {
        let mut tape = Tape::new();
        let a = tape.constant(Array::zeros(&[2, 3]));
        let b = tape.constant(Array::zeros(&[2, 2]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add(a, b).is_err());
        assert!(tape.slice_rows(a, 1, 5).is_err());
        assert!(tape.gather_cols(a, &[3]).is_err());
    }
}
