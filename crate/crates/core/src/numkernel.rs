//! Dense row-major matrices and a small reverse-mode tape.
//!
//! The op vocabulary is fixed: matmul, add, sub, mul, scale, tanh, relu,
//! exp, softmax, log-softmax, mean, sum, sum-of-squares, concat, slice,
//! transpose and a fused RBF kernel mean. Every reduction accumulates
//! left to right in row-major order, so a forward pass is bitwise
//! reproducible for identical inputs.
//!
//! A [`Tape`] records nodes in creation order. Inputs always have smaller
//! ids than the node consuming them, and [`Tape::backward`] walks ids in
//! strictly descending order, visiting each node once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("tensor", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape("from_rows", (i, r.len()), (i, cols)));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor2) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Tanh,
    Relu,
    Exp,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, m, p) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2::zeros(n, p);
    // c[i][j] accumulates a[i][l] * b[l][j] for l = 0, 1, ... in order.
    for i in 0..n {
        let orow = &mut out.data[i * p..(i + 1) * p];
        for l in 0..m {
            let av = a.data[i * m + l];
            let brow = &b.data[l * p..(l + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

pub fn unary(op: UnaryOp, a: &Tensor2) -> Tensor2 {
    match op {
        UnaryOp::Tanh => a.map(f64::tanh),
        UnaryOp::Relu => a.map(|v| if v > 0.0 { v } else { 0.0 }),
        UnaryOp::Exp => a.map(f64::exp),
        UnaryOp::Scale(s) => a.map(|v| v * s),
    }
}

pub fn binary(op: BinaryOp, a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
            },
            a.shape(),
            b.shape(),
        ));
    }
    Ok(match op {
        BinaryOp::Add => a.zip(b, |x, y| x + y),
        BinaryOp::Sub => a.zip(b, |x, y| x - y),
        BinaryOp::Mul => a.zip(b, |x, y| x * y),
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor2) -> Tensor2 {
    let mut out = a.clone();
    for r in 0..a.rows {
        let row = &mut out.data[r * a.cols..(r + 1) * a.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn log_softmax_rows(a: &Tensor2) -> Tensor2 {
    let mut out = a.clone();
    for r in 0..a.rows {
        let row = &mut out.data[r * a.cols..(r + 1) * a.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter() {
            total += (*v - max).exp();
        }
        let lse = max + total.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn sum(a: &Tensor2) -> f64 {
    let mut acc = 0.0;
    for v in &a.data {
        acc += v;
    }
    acc
}

pub fn sum_sq(a: &Tensor2) -> f64 {
    let mut acc = 0.0;
    for v in &a.data {
        acc += v * v;
    }
    acc
}

pub fn concat_cols(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.rows != b.rows {
        return Err(Error::shape("concat_cols", a.shape(), b.shape()));
    }
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for r in 0..a.rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Ok(Tensor2 {
        rows: a.rows,
        cols,
        data,
    })
}

pub fn concat_rows(parts: &[&Tensor2]) -> Result<Tensor2> {
    let cols = parts.first().map_or(0, |t| t.cols);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols != cols {
            return Err(Error::shape("concat_rows", (rows, cols), p.shape()));
        }
        data.extend_from_slice(&p.data);
        rows += p.rows;
    }
    Ok(Tensor2 { rows, cols, data })
}

pub fn slice_cols(a: &Tensor2, start: usize, len: usize) -> Result<Tensor2> {
    if start + len > a.cols {
        return Err(Error::shape("slice_cols", a.shape(), (start, len)));
    }
    let mut data = Vec::with_capacity(a.rows * len);
    for r in 0..a.rows {
        data.extend_from_slice(&a.row(r)[start..start + len]);
    }
    Ok(Tensor2 {
        rows: a.rows,
        cols: len,
        data,
    })
}

/// Mean of `exp(-|a_i - b_j|^2 / (2 bandwidth^2))` over all row pairs.
pub fn rbf_mean(a: &Tensor2, b: &Tensor2, bandwidth: f64) -> Result<f64> {
    if a.cols != b.cols {
        return Err(Error::shape("rbf_mean", a.shape(), b.shape()));
    }
    if a.rows == 0 || b.rows == 0 {
        return Err(Error::Usage("rbf_mean needs non-empty row sets".into()));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut acc = 0.0;
    for i in 0..a.rows {
        for j in 0..b.rows {
            acc += (-sq_dist(a.row(i), b.row(j)) * inv).exp();
        }
    }
    Ok(acc / (a.rows * b.rows) as f64)
}

pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    SumSq(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Transpose(NodeId),
    RbfMean(NodeId, NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor2,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoint buffers indexed by node id. Nodes the root does not depend on
/// have no entry.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor2> {
        self.adj.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, or zeros of the given shape when it was not reached.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Tensor2 {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor2) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Overwrites a leaf value. Call [`Tape::replay`] to refresh dependents.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor2) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or_else(|| Error::Usage(format!("unknown node {}", id.0)))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Usage(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf node in id order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn eval(&self, op: &Op) -> Result<Tensor2> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => matmul(v(a), v(b))?,
            Op::Binary(op, a, b) => binary(*op, v(a), v(b))?,
            Op::Unary(op, a) => unary(*op, v(a)),
            Op::Softmax(a) => softmax_rows(v(a)),
            Op::LogSoftmax(a) => log_softmax_rows(v(a)),
            Op::Mean(a) => Tensor2::scalar(sum(v(a)) / v(a).len() as f64),
            Op::Sum(a) => Tensor2::scalar(sum(v(a))),
            Op::SumSq(a) => Tensor2::scalar(sum_sq(v(a))),
            Op::ConcatCols(a, b) => concat_cols(v(a), v(b))?,
            Op::ConcatRows(ids) => {
                let parts: Vec<&Tensor2> = ids.iter().map(v).collect();
                concat_rows(&parts)?
            }
            Op::SliceCols(a, start, len) => slice_cols(v(a), *start, *len)?,
            Op::Transpose(a) => v(a).transpose(),
            Op::RbfMean(a, b, bw) => Tensor2::scalar(rbf_mean(v(a), v(b), *bw)?),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Binary(BinaryOp::Add, a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Binary(BinaryOp::Sub, a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Binary(BinaryOp::Mul, a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Unary(UnaryOp::Scale(s), a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(UnaryOp::Tanh, a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(UnaryOp::Relu, a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(UnaryOp::Exp, a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumSq(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(a, start, len))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn rbf_mean(&mut self, a: NodeId, b: NodeId, bandwidth: f64) -> Result<NodeId> {
        self.push(Op::RbfMean(a, b, bandwidth))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.backward_seeded(&[(root, Tensor2::scalar(1.0))])
    }

    /// Reverse pass with explicit output adjoints. Used to push an
    /// upstream gradient computed on another tape into this one.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor2)]) -> Result<Gradients> {
        let mut adj: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (id, seed) in seeds {
            if id.0 >= self.nodes.len() {
                return Err(Error::Usage(format!("unknown node {}", id.0)));
            }
            if seed.shape() != self.value(*id).shape() {
                return Err(Error::shape("seed", self.value(*id).shape(), seed.shape()));
            }
            accumulate(&mut adj, *id, seed.clone());
            top = top.max(id.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, i: usize, g: &Tensor2, adj: &mut [Option<Tensor2>]) -> Result<()> {
        let node = &self.nodes[i];
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = matmul(g, &v(b).transpose())?;
                let db = matmul(&v(a).transpose(), g)?;
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Binary(op, a, b) => match op {
                BinaryOp::Add => {
                    accumulate(adj, *a, g.clone());
                    accumulate(adj, *b, g.clone());
                }
                BinaryOp::Sub => {
                    accumulate(adj, *a, g.clone());
                    accumulate(adj, *b, g.map(|x| -x));
                }
                BinaryOp::Mul => {
                    accumulate(adj, *a, g.zip(v(b), |x, y| x * y));
                    accumulate(adj, *b, g.zip(v(a), |x, y| x * y));
                }
            },
            Op::Unary(op, a) => {
                let da = match op {
                    UnaryOp::Tanh => g.zip(&node.value, |x, y| x * (1.0 - y * y)),
                    UnaryOp::Relu => g.zip(v(a), |x, y| if y > 0.0 { x } else { 0.0 }),
                    UnaryOp::Exp => g.zip(&node.value, |x, y| x * y),
                    UnaryOp::Scale(s) => g.map(|x| x * s),
                };
                accumulate(adj, *a, da);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut da = Tensor2::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let mut dot = 0.0;
                    for c in 0..y.cols {
                        dot += g.get(r, c) * y.get(r, c);
                    }
                    for c in 0..y.cols {
                        da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(adj, *a, da);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut da = Tensor2::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let mut total = 0.0;
                    for c in 0..y.cols {
                        total += g.get(r, c);
                    }
                    for c in 0..y.cols {
                        da.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                    }
                }
                accumulate(adj, *a, da);
            }
            Op::Mean(a) => {
                let (r, c) = v(a).shape();
                accumulate(adj, *a, Tensor2::filled(r, c, g.data[0] / (r * c) as f64));
            }
            Op::Sum(a) => {
                let (r, c) = v(a).shape();
                accumulate(adj, *a, Tensor2::filled(r, c, g.data[0]));
            }
            Op::SumSq(a) => {
                let s = 2.0 * g.data[0];
                accumulate(adj, *a, v(a).map(|x| s * x));
            }
            Op::ConcatCols(a, b) => {
                let ca = v(a).cols;
                accumulate(adj, *a, slice_cols(g, 0, ca)?);
                accumulate(adj, *b, slice_cols(g, ca, g.cols - ca)?);
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for id in ids {
                    let (r, c) = v(id).shape();
                    let part = Tensor2 {
                        rows: r,
                        cols: c,
                        data: g.data[offset * c..(offset + r) * c].to_vec(),
                    };
                    accumulate(adj, *id, part);
                    offset += r;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = v(a).shape();
                let mut da = Tensor2::zeros(r, c);
                for row in 0..r {
                    for j in 0..*len {
                        da.set(row, start + j, g.get(row, j));
                    }
                }
                accumulate(adj, *a, da);
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::RbfMean(a, b, bw) => {
                let (ta, tb) = (v(a), v(b));
                let inv = 1.0 / (2.0 * bw * bw);
                let norm = g.data[0] / (ta.rows * tb.rows) as f64;
                let mut da = Tensor2::zeros(ta.rows, ta.cols);
                let mut db = Tensor2::zeros(tb.rows, tb.cols);
                for i in 0..ta.rows {
                    for j in 0..tb.rows {
                        let k = (-sq_dist(ta.row(i), tb.row(j)) * inv).exp();
                        // d/da of exp(-|a-b|^2 inv) = -2 inv (a - b) k
                        let coef = -2.0 * inv * k * norm;
                        for c in 0..ta.cols {
                            let diff = ta.get(i, c) - tb.get(j, c);
                            da.data[i * ta.cols + c] += coef * diff;
                            db.data[j * tb.cols + c] -= coef * diff;
                        }
                    }
                }
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for l in 0..a.cols() {
                    acc += a.get(i, l) * b.get(l, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor2::identity(2), &m).unwrap(), m);
        let ones = Tensor2::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&m, &ones).unwrap().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Tensor2::zeros(2, 3), &Tensor2::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn elementwise_cases() {
        assert_eq!(unary(UnaryOp::Tanh, &Tensor2::zeros(2, 2)), Tensor2::zeros(2, 2));
        let r = unary(UnaryOp::Relu, &Tensor2::row_vector(&[-1.0, 2.0]));
        assert_eq!(r.as_slice(), &[0.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 3);
        let b = random(&mut rng, 3, 3);
        let s = binary(BinaryOp::Add, &a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), a.get(i, j) + b.get(i, j));
            }
        }
        assert!(binary(BinaryOp::Mul, &a, &Tensor2::zeros(1, 3)).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&Tensor2::zeros(1, 3));
        for v in u.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax_rows(&Tensor2::row_vector(&[1000.0, 1000.0]));
        assert_eq!(big.as_slice(), &[0.5, 0.5]);
        // exp-normalize of (1, 2, 3), evaluated at 50 digits
        let expect = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        let s = softmax_rows(&Tensor2::row_vector(&[1.0, 2.0, 3.0]));
        for (a, b) in s.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((sum(&s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor2::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &Tensor2::filled(2, 2, 1.0));
    }

    #[test]
    fn backward_of_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(&mut rng, 3, 2);
        let x = random(&mut rng, 2, 1);
        let mut tape = Tape::new();
        let wn = tape.leaf(w.clone());
        let xn = tape.leaf(x.clone());
        let wx = tape.matmul(wn, xn).unwrap();
        let root = tape.sum_sq(wx).unwrap();
        let g = tape.backward(root).unwrap();
        let wxv = matmul(&w, &x).unwrap();
        let expect = unary(UnaryOp::Scale(2.0), &matmul(&wxv, &x.transpose()).unwrap());
        for (a, b) in g.get(wn).unwrap().as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor2::zeros(2, 2));
        let t = tape.tanh(p).unwrap();
        assert!(matches!(tape.backward(t), Err(Error::Usage(_))));
    }

    fn fd_check(build: impl Fn(&mut Tape, &[NodeId]) -> NodeId, inputs: Vec<Tensor2>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root).unwrap();
        let h = 1e-5;
        for (n, id) in ids.iter().enumerate() {
            let base = inputs[n].clone();
            for e in 0..base.len() {
                let mut plus = base.clone();
                plus.as_mut_slice()[e] += h;
                tape.set_leaf(*id, plus).unwrap();
                tape.replay().unwrap();
                let fp = tape.value(root).item().unwrap();
                let mut minus = base.clone();
                minus.as_mut_slice()[e] -= h;
                tape.set_leaf(*id, minus).unwrap();
                tape.replay().unwrap();
                let fm = tape.value(root).item().unwrap();
                tape.set_leaf(*id, base.clone()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.get_or_zeros(*id, base.shape()).as_slice()[e];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {n} entry {e}: analytic {an} vs fd {fd}");
            }
        }
        tape.replay().unwrap();
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 2, 3);
        let m = random(&mut rng, 3, 2);
        fd_check(
            |t, ids| {
                let p = t.matmul(ids[0], ids[2]).unwrap();
                t.sum_sq(p).unwrap()
            },
            vec![a.clone(), b.clone(), m.clone()],
        );
        fd_check(
            |t, ids| {
                let s = t.sub(ids[0], ids[1]).unwrap();
                let m = t.mul(s, ids[0]).unwrap();
                let ad = t.add(m, ids[1]).unwrap();
                let e = t.exp(ad).unwrap();
                let th = t.tanh(e).unwrap();
                let sc = t.scale(th, 1.7).unwrap();
                t.mean(sc).unwrap()
            },
            vec![a.clone(), b.clone()],
        );
        fd_check(
            |t, ids| {
                let s = t.softmax_rows(ids[0]).unwrap();
                let l = t.log_softmax_rows(ids[1]).unwrap();
                let p = t.mul(s, l).unwrap();
                t.sum(p).unwrap()
            },
            vec![a.clone(), b.clone()],
        );
        fd_check(
            |t, ids| {
                let c = t.concat_cols(ids[0], ids[1]).unwrap();
                let s = t.slice_cols(c, 1, 4).unwrap();
                let tr = t.transpose(s).unwrap();
                let r = t.concat_rows(&[tr, tr]).unwrap();
                t.sum_sq(r).unwrap()
            },
            vec![a.clone(), b.clone()],
        );
        fd_check(
            |t, ids| {
                let k1 = t.rbf_mean(ids[0], ids[1], 0.8).unwrap();
                let k2 = t.rbf_mean(ids[0], ids[0], 0.8).unwrap();
                t.sub(k2, k1).unwrap()
            },
            vec![a.clone(), random(&mut rng, 4, 3)],
        );
        // keep away from the kink at zero
        let shifted = Tensor2::row_vector(&[-0.7, 0.4, 1.3]);
        fd_check(
            |t, ids| {
                let r = t.relu(ids[0]).unwrap();
                t.sum_sq(r).unwrap()
            },
            vec![shifted],
        );
    }

    #[test]
    fn replay_is_bitwise_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let a = tape.leaf(random(&mut rng, 4, 4));
        let b = tape.leaf(random(&mut rng, 4, 4));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(m).unwrap();
        let r = tape.sum_sq(s).unwrap();
        let first = tape.value(r).clone();
        tape.replay().unwrap();
        assert_eq!(tape.value(r).as_slice()[0].to_bits(), first.as_slice()[0].to_bits());
    }

    #[test]
    fn node_ids_are_topological() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor2::scalar(1.0));
        let b = tape.exp(a).unwrap();
        let c = tape.add(a, b).unwrap();
        assert!(a < b && b < c);
        assert_eq!(tape.len(), 3);
    }
}
