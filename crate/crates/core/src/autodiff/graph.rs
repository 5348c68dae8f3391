use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{EmpoError, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Matmul(Var, Var),
    /// `a · bᵀ`
    MatmulNt(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    /// Row-wise log-softmax of logits, read at one target id per row.
    GatherLogProb(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    pub fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) | MatmulNt(a, b) | ConcatRows(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | Exp(a)
            | Log(a)
            | LogSigmoid(a)
            | Transpose(a)
            | SoftmaxRows(a)
            | GatherLogProb(a, _)
            | GatherRows(a, _)
            | Sum(a)
            | Mean(a) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub value: Tensor,
    pub grad: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Arena of recorded operations. Nodes are appended in creation order, which
/// is a topological order of the parent graph.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x < 0.0 {
        x - x.exp().ln_1p()
    } else {
        -(-x).exp().ln_1p()
    }
}

/// `σ(x)` without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> EmpoError {
    EmpoError::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
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

    /// Drops every node created after the first `len`. Vars past that point
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let grad = Tensor::zeros_like(&value);
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let grad = Tensor::zeros_like(&value);
        self.nodes.push(Node {
            value,
            grad,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let grad = Tensor::zeros_like(&value);
        self.nodes.push(Node {
            value,
            grad,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(ta.shape().to_vec())
        } else if ta.numel() == 1 {
            Ok(tb.shape().to_vec())
        } else if tb.numel() == 1 {
            Ok(ta.shape().to_vec())
        } else {
            Err(dim_err(op, ta, tb))
        }
    }

    fn elementwise(&self, a: Var, b: Var, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let (sa, sb) = (ta.numel() == 1 && n != 1, tb.numel() == 1 && n != 1);
        let data = (0..n)
            .map(|i| {
                let x = if sa { ta.data()[0] } else { ta.data()[i] };
                let y = if sb { tb.data()[0] } else { tb.data()[i] };
                f(x, y)
            })
            .collect();
        Tensor::new(shape, data).expect("elementwise shape")
    }

    /// Elementwise sum; one side may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let value = self.elementwise(a, b, shape, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("subtract", a, b)?;
        let value = self.elementwise(a, b, shape, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("multiply", a, b)?;
        let value = self.elementwise(a, b, shape, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| s * x);
        self.push(value, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(EmpoError::Contract(format!("log of non-positive value {bad}")));
        }
        let value = t.map(f64::ln);
        Ok(self.push(value, Op::Log(a)))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid);
        self.push(value, Op::LogSigmoid(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.cols() {
            return Err(dim_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        matmul_nt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatmulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !is_matrix(t) {
            return Err(EmpoError::Contract(format!("transpose of shape {:?}", t.shape())));
        }
        let value = t.transpose();
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !is_matrix(t) {
            return Err(EmpoError::Contract(format!("softmax_rows of shape {:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// For logits of shape `[T, V]`, returns the `[T]` vector of
    /// `log softmax(logits[t])[targets[t]]`.
    pub fn gather_log_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if !is_matrix(t) || t.rows() != targets.len() {
            return Err(EmpoError::Dimension {
                op: "gather_log_prob",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let v = t.cols();
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(EmpoError::Input(format!("target id {bad} outside vocabulary of {v}")));
        }
        let out = targets
            .iter()
            .enumerate()
            .map(|(r, &id)| {
                let row = t.row(r);
                row[id] - log_sum_exp(row)
            })
            .collect();
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::GatherLogProb(logits, targets.to_vec())))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !is_matrix(t) {
            return Err(EmpoError::Contract(format!("gather_rows of shape {:?}", t.shape())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows()) {
            return Err(EmpoError::Input(format!(
                "row id {bad} outside table of {} rows",
                t.rows()
            )));
        }
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.cols() {
            return Err(dim_err("concat_rows", ta, tb));
        }
        let mut out = ta.data().to_vec();
        out.extend_from_slice(tb.data());
        let value = Tensor::matrix(ta.rows() + tb.rows(), ta.cols(), out)?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean over all entries; an empty tensor has mean 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel().max(1) as f64;
        let value = Tensor::scalar(t.sum() / n);
        self.push(value, Op::Mean(a))
    }

    /// Reverse-mode sweep from a one-element root. Gradients are added to
    /// whatever the nodes already hold, so two calls without
    /// [`Graph::zero_grad`] double every gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(EmpoError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            self.nodes[i].grad.add_assign(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut Tensor)| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| Tensor::zeros_like(&nodes[v.0].value));
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| reduce_into(s, g, 1.0));
                acc(*b, &|s| reduce_into(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| reduce_into(s, g, 1.0));
                acc(*b, &|s| reduce_into(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let ga = broadcast_mul(g, tb);
                let gb = broadcast_mul(g, ta);
                acc(*a, &|s| reduce_into(s, &ga, 1.0));
                acc(*b, &|s| reduce_into(s, &gb, 1.0));
            }
            Op::Scale(a, k) => acc(*a, &|s| s.scaled_add_assign(*k, g)),
            Op::Exp(a) => acc(*a, &|s| {
                for ((d, &gv), &y) in s.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gv * y;
                }
            }),
            Op::Log(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &|s| {
                    for ((d, &gv), &xv) in s.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *d += gv / xv;
                    }
                })
            }
            Op::LogSigmoid(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &|s| {
                    for ((d, &gv), &xv) in s.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *d += gv * sigmoid(-xv);
                    }
                })
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &|s| matmul_nt_into(g.data(), tb.data(), s.data_mut(), m, n, k));
                acc(*b, &|s| matmul_tn_into(ta.data(), g.data(), s.data_mut(), m, k, n));
            }
            Op::MatmulNt(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &|s| matmul_into(g.data(), tb.data(), s.data_mut(), m, n, k));
                acc(*b, &|s| matmul_tn_into(g.data(), ta.data(), s.data_mut(), m, n, k));
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(*a, &|s| s.add_assign(&gt));
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                acc(*a, &|s| {
                    if c == 0 {
                        return;
                    }
                    for ((srow, grow), yrow) in s
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, &gv), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                })
            }
            Op::GatherLogProb(a, targets) => {
                let logits = &nodes[a.0].value;
                let c = logits.cols();
                acc(*a, &|s| {
                    for (r, &id) in targets.iter().enumerate() {
                        let row = logits.row(r);
                        let lse = log_sum_exp(row);
                        let gv = g.data()[r];
                        let srow = &mut s.data_mut()[r * c..(r + 1) * c];
                        for (d, &z) in srow.iter_mut().zip(row) {
                            *d -= gv * (z - lse).exp();
                        }
                        srow[id] += gv;
                    }
                })
            }
            Op::GatherRows(a, ids) => {
                let c = out.cols();
                acc(*a, &|s| {
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = &g.data()[r * c..(r + 1) * c];
                        let srow = &mut s.data_mut()[id * c..(id + 1) * c];
                        for (d, &gv) in srow.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                })
            }
            Op::ConcatRows(a, b) => {
                let split = nodes[a.0].value.numel();
                acc(*a, &|s| {
                    for (d, &gv) in s.data_mut().iter_mut().zip(&g.data()[..split]) {
                        *d += gv;
                    }
                });
                acc(*b, &|s| {
                    for (d, &gv) in s.data_mut().iter_mut().zip(&g.data()[split..]) {
                        *d += gv;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, &|s| s.data_mut().iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel().max(1) as f64;
                let gv = g.item() / n;
                acc(*a, &|s| s.data_mut().iter_mut().for_each(|d| *d += gv));
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}

/// Adds `k * g` into `slot`, summing over `g` when `slot` is a broadcast scalar.
fn reduce_into(slot: &mut Tensor, g: &Tensor, k: f64) {
    if slot.numel() == g.numel() {
        slot.scaled_add_assign(k, g);
    } else {
        slot.data_mut()[0] += k * g.sum();
    }
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.numel() == g.numel() {
        let data = g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect();
        Tensor::new(g.shape().to_vec(), data).expect("same shape")
    } else {
        let k = other.data()[0];
        g.map(|x| x * k)
    }
}
