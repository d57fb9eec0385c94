//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op is evaluated eagerly when recorded, and the record keeps enough
//! information to re-run the forward pass ([`Graph::replay`]) after a leaf has been
//! overwritten. The finite-difference checker relies on that.

use std::collections::HashMap;

use super::tensor::{dot, matmul_at_into, matmul_bt_into, sigmoid, Tensor};
use crate::error::{dim_err, Error, Result};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        input: NodeId,
        shape: Vec<usize>,
    },
    BatchMatVec {
        weights: NodeId,
        x: NodeId,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    GatherMean {
        table: NodeId,
        lists: Vec<Vec<usize>>,
    },
    BatchNorm {
        x: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Normalize {
        x: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    BceWithLogits {
        logits: NodeId,
        labels: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Hadamard(..) => "hadamard",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::BatchMatVec { .. } => "batch_matvec",
            Op::Gather { .. } => "gather",
            Op::GatherMean { .. } => "gather_mean",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Normalize { .. } => "normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Hadamard(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sigmoid(a) | Op::LeakyRelu(a, _) | Op::Sum(a) | Op::Mean(a) => {
                vec![*a]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { input, .. } | Op::Reshape { input, .. } => vec![*input],
            Op::BatchMatVec { weights, x } => vec![*weights, *x],
            Op::Gather { table, .. } | Op::GatherMean { table, .. } => vec![*table],
            Op::BatchNorm { x, .. } | Op::Normalize { x, .. } => vec![*x],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation. Nodes are stored in creation order, which is a
/// topological order by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
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

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, value, false)
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push_leaf(Op::Param, value, true);
        self.params.push((name.into(), id));
        id
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Overwrite a leaf. Call [`Graph::replay`] afterwards to refresh dependents.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input | Op::Param) {
            return Err(Error::Usage(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(dim_err!(
                "leaf shape {:?} cannot take {:?}",
                node.value.shape(),
                value.shape()
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Batch mean and (biased) variance recorded by a batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, mut op: Op) -> Result<NodeId> {
        let value = evaluate(&self.nodes, &mut op)?;
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Re-run every non-leaf op in recorded order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                continue;
            }
            let mut op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
            let result = evaluate(&self.nodes[..i], &mut op);
            self.nodes[i].op = op;
            self.nodes[i].value = result?;
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    /// `x[m×n] + row[n]`, broadcasting the row over the leading axis.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(x, row))
    }

    /// `x[m×n] ⊙ row[n]`, broadcasting the row over the leading axis.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::MulRow(x, row))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Hadamard(a, b))
    }

    /// Multiply row `i` of `x[m×n]` by the scalar `s[i]` of `s[m×1]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::ScaleRows(x, s))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.push(Op::LeakyRelu(x, slope))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice {
            input,
            axis,
            start,
            len,
        })
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape {
            input,
            shape: shape.to_vec(),
        })
    }

    /// Per-row matrix-vector product: row `i` of `weights[m×(r·n)]` is read as an
    /// `r×n` row-major matrix and applied to row `i` of `x[m×n]`, giving `[m×r]`.
    pub fn batch_matvec(&mut self, weights: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::BatchMatVec { weights, x })
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Gather { table, ids })
    }

    /// Mean of the table rows listed per output row; an empty list yields zeros.
    pub fn gather_mean(&mut self, table: NodeId, lists: Vec<Vec<usize>>) -> Result<NodeId> {
        self.push(Op::GatherMean { table, lists })
    }

    /// Column-wise standardization with the batch's own mean and biased variance.
    pub fn batch_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if self.nodes[x.0].value.rows() < 2 {
            return Err(Error::Usage(
                "batch normalization in train mode needs at least 2 rows".into(),
            ));
        }
        self.push(Op::BatchNorm {
            x,
            eps,
            mean: vec![],
            var: vec![],
        })
    }

    /// Column-wise standardization with fixed statistics.
    pub fn normalize(&mut self, x: NodeId, mean: &[f64], var: &[f64], eps: f64) -> Result<NodeId> {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.push(Op::Normalize {
            x,
            mean: mean.to_vec(),
            inv_std,
        })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("label {bad} is not 0 or 1")));
        }
        self.push(Op::BceWithLogits {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Reverse pass from a scalar `loss` node. Gradients are produced for every node
    /// that depends on a parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad && !matches!(node.op, Op::Input | Op::Param) {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g.data(), bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(*id) {
                        accumulate(grads, *id, val(*id).shape(), g.data().to_vec());
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, val(*x).shape(), g.data().to_vec());
                }
                if self.wants(*row) {
                    let n = g.cols();
                    let mut dr = vec![0.0; n];
                    for r in g.data().chunks(n) {
                        for (d, v) in dr.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *row, val(*row).shape(), dr);
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(*x), val(*row));
                let n = xv.cols();
                if self.wants(*x) {
                    let dx = g
                        .data()
                        .chunks(n)
                        .flat_map(|gr| gr.iter().zip(rv.data()).map(|(a, b)| a * b))
                        .collect();
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.wants(*row) {
                    let mut dr = vec![0.0; n];
                    for (gr, xr) in g.data().chunks(n).zip(xv.data().chunks(n)) {
                        for ((d, a), b) in dr.iter_mut().zip(gr).zip(xr) {
                            *d += a * b;
                        }
                    }
                    accumulate(grads, *row, rv.shape(), dr);
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let n = xv.cols();
                if self.wants(*x) {
                    let dx = g
                        .data()
                        .chunks(n)
                        .zip(sv.data())
                        .flat_map(|(gr, &sc)| gr.iter().map(move |v| v * sc))
                        .collect();
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.wants(*s) {
                    let ds = g
                        .data()
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(gr, xr)| dot(gr, xr))
                        .collect();
                    accumulate(grads, *s, sv.shape(), ds);
                }
            }
            Op::Scale(x, c) => {
                let dx = g.data().iter().map(|v| v * c).collect();
                accumulate(grads, *x, val(*x).shape(), dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, val(*x).shape(), dx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                let dx = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &xi)| if xi >= 0.0 { *gv } else { gv * slope })
                    .collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let ext = pv.shape()[*axis];
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        accumulate(grads, *p, pv.shape(), dp);
                    }
                    offset += ext;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let iv = val(*input);
                let (outer, total, inner) = split_axis(iv.shape(), *axis);
                let mut dx = vec![0.0; iv.len()];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, *input, iv.shape(), dx);
            }
            Op::Reshape { input, .. } => {
                accumulate(grads, *input, val(*input).shape(), g.data().to_vec());
            }
            Op::BatchMatVec { weights, x } => {
                let (wv, xv) = (val(*weights), val(*x));
                let (m, n) = (xv.rows(), xv.cols());
                let r = g.cols();
                if self.wants(*weights) {
                    let mut dw = vec![0.0; wv.len()];
                    for i in 0..m {
                        let xi = xv.row_slice(i);
                        for o in 0..r {
                            let go = g.data()[i * r + o];
                            let dst = &mut dw[(i * r + o) * n..(i * r + o + 1) * n];
                            for (d, xk) in dst.iter_mut().zip(xi) {
                                *d += go * xk;
                            }
                        }
                    }
                    accumulate(grads, *weights, wv.shape(), dw);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for i in 0..m {
                        let wi = wv.row_slice(i);
                        let dxi = &mut dx[i * n..(i + 1) * n];
                        for o in 0..r {
                            let go = g.data()[i * r + o];
                            for (d, w) in dxi.iter_mut().zip(&wi[o * n..(o + 1) * n]) {
                                *d += go * w;
                            }
                        }
                    }
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (gr, &id) in g.data().chunks(d).zip(ids) {
                    for (t, v) in dt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                        *t += v;
                    }
                }
                accumulate(grads, *table, tv.shape(), dt);
            }
            Op::GatherMean { table, lists } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (gr, list) in g.data().chunks(d).zip(lists) {
                    if list.is_empty() {
                        continue;
                    }
                    let w = 1.0 / list.len() as f64;
                    for &id in list {
                        for (t, v) in dt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                            *t += v * w;
                        }
                    }
                }
                accumulate(grads, *table, tv.shape(), dt);
            }
            Op::BatchNorm { x, eps, var, .. } => {
                let xv = val(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let xhat = node.value.data();
                let mut sum_g = vec![0.0; n];
                let mut sum_gx = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        sum_g[j] += gv;
                        sum_gx[j] += gv * xhat[i * n + j];
                    }
                }
                let mf = m as f64;
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    let inv = 1.0 / (var[j] + eps).sqrt();
                    for i in 0..m {
                        let k = i * n + j;
                        dx[k] = inv / mf * (mf * g.data()[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Normalize { x, inv_std, .. } => {
                let xv = val(*x);
                let n = xv.cols();
                let dx = g
                    .data()
                    .chunks(n)
                    .flat_map(|gr| gr.iter().zip(inv_std).map(|(a, b)| a * b))
                    .collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                accumulate(grads, *x, xv.shape(), vec![g.item(); xv.len()]);
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let v = g.item() / xv.len() as f64;
                accumulate(grads, *x, xv.shape(), vec![v; xv.len()]);
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = val(*logits);
                let scale = g.item() / labels.len() as f64;
                let dz = lv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                accumulate(grads, *logits, lv.shape(), dz);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], data: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}

/// `(outer, extent, inner)` such that `shape = [..outer.., extent, ..inner..]`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn row_operand(x: &Tensor, row: &Tensor, what: &str) -> Result<()> {
    if row.len() != x.cols() || row.rows() != 1 {
        return Err(dim_err!(
            "{what}: row {:?} does not broadcast over {:?}",
            row.shape(),
            x.shape()
        ));
    }
    Ok(())
}

fn evaluate(nodes: &[Node], op: &mut Op) -> Result<Tensor> {
    let val = |id: &NodeId| &nodes[id.0].value;
    let out = match op {
        Op::Input | Op::Param => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => val(a).matmul(val(b))?,
        Op::Add(a, b) => {
            let (a, b) = (val(a), val(b));
            same_shape(a, b, "add")?;
            let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), d)?
        }
        Op::AddRow(x, row) => {
            let (x, row) = (val(x), val(row));
            row_operand(x, row, "add_row")?;
            let d = x
                .data()
                .chunks(x.cols())
                .flat_map(|r| r.iter().zip(row.data()).map(|(a, b)| a + b))
                .collect();
            Tensor::new(x.shape().to_vec(), d)?
        }
        Op::MulRow(x, row) => {
            let (x, row) = (val(x), val(row));
            row_operand(x, row, "mul_row")?;
            let d = x
                .data()
                .chunks(x.cols())
                .flat_map(|r| r.iter().zip(row.data()).map(|(a, b)| a * b))
                .collect();
            Tensor::new(x.shape().to_vec(), d)?
        }
        Op::Hadamard(a, b) => {
            let (a, b) = (val(a), val(b));
            same_shape(a, b, "hadamard")?;
            let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), d)?
        }
        Op::ScaleRows(x, s) => {
            let (x, s) = (val(x), val(s));
            if s.len() != x.rows() {
                return Err(dim_err!(
                    "scale_rows: {:?} scalars for {:?}",
                    s.shape(),
                    x.shape()
                ));
            }
            let d = x
                .data()
                .chunks(x.cols())
                .zip(s.data())
                .flat_map(|(r, &c)| r.iter().map(move |v| v * c))
                .collect();
            Tensor::new(x.shape().to_vec(), d)?
        }
        Op::Scale(x, c) => {
            let x = val(x);
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * *c).collect())?
        }
        Op::Sigmoid(x) => {
            let x = val(x);
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect())?
        }
        Op::LeakyRelu(x, slope) => {
            let x = val(x);
            let d = x
                .data()
                .iter()
                .map(|&v| if v >= 0.0 { v } else { v * *slope })
                .collect();
            Tensor::new(x.shape().to_vec(), d)?
        }
        Op::Concat { parts, axis } => concat_values(&parts.iter().map(val).collect::<Vec<_>>(), *axis)?,
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            let x = val(input);
            if *axis >= x.shape().len() || *len == 0 || *start + *len > x.shape()[*axis] {
                return Err(dim_err!(
                    "slice [{start}, {}) on axis {axis} of {:?}",
                    *start + *len,
                    x.shape()
                ));
            }
            let (outer, total, inner) = split_axis(x.shape(), *axis);
            let mut d = Vec::with_capacity(outer * *len * inner);
            for o in 0..outer {
                let base = (o * total + *start) * inner;
                d.extend_from_slice(&x.data()[base..base + *len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, d)?
        }
        Op::Reshape { input, shape } => val(input).reshape(shape)?,
        Op::BatchMatVec { weights, x } => {
            let (w, x) = (val(weights), val(x));
            let (m, n) = (x.rows(), x.cols());
            if x.shape().len() != 2 || w.rows() != m || w.cols() % n != 0 {
                return Err(dim_err!(
                    "batch_matvec: weights {:?} vs input {:?}",
                    w.shape(),
                    x.shape()
                ));
            }
            let r = w.cols() / n;
            let mut d = Vec::with_capacity(m * r);
            for i in 0..m {
                let wi = w.row_slice(i);
                let xi = x.row_slice(i);
                for o in 0..r {
                    d.push(dot(&wi[o * n..(o + 1) * n], xi));
                }
            }
            Tensor::matrix(m, r, d)?
        }
        Op::Gather { table, ids } => {
            let t = val(table);
            let (rows, dim) = (t.rows(), t.cols());
            let mut d = Vec::with_capacity(ids.len() * dim);
            for &id in ids.iter() {
                if id >= rows {
                    return Err(dim_err!("gather id {id} outside table of {rows} rows"));
                }
                d.extend_from_slice(t.row_slice(id));
            }
            Tensor::matrix(ids.len(), dim, d)?
        }
        Op::GatherMean { table, lists } => {
            let t = val(table);
            let (rows, dim) = (t.rows(), t.cols());
            let mut d = vec![0.0; lists.len() * dim];
            for (out, list) in d.chunks_mut(dim).zip(lists.iter()) {
                for &id in list {
                    if id >= rows {
                        return Err(dim_err!("gather id {id} outside table of {rows} rows"));
                    }
                    for (o, v) in out.iter_mut().zip(t.row_slice(id)) {
                        *o += v;
                    }
                }
                if !list.is_empty() {
                    let k = list.len() as f64;
                    for o in out.iter_mut() {
                        *o /= k;
                    }
                }
            }
            Tensor::matrix(lists.len(), dim, d)?
        }
        Op::BatchNorm { x, eps, mean, var } => {
            let x = val(x);
            let (m, n) = (x.rows(), x.cols());
            let mf = m as f64;
            let mut mu = vec![0.0; n];
            for r in x.data().chunks(n) {
                for (a, v) in mu.iter_mut().zip(r) {
                    *a += v;
                }
            }
            mu.iter_mut().for_each(|a| *a /= mf);
            let mut s2 = vec![0.0; n];
            for r in x.data().chunks(n) {
                for ((a, v), u) in s2.iter_mut().zip(r).zip(&mu) {
                    *a += (v - u) * (v - u);
                }
            }
            s2.iter_mut().for_each(|a| *a /= mf);
            let inv: Vec<f64> = s2.iter().map(|v| 1.0 / (v + *eps).sqrt()).collect();
            let d = x
                .data()
                .chunks(n)
                .flat_map(|r| {
                    r.iter()
                        .zip(&mu)
                        .zip(&inv)
                        .map(|((v, u), s)| (v - u) * s)
                })
                .collect();
            *mean = mu;
            *var = s2;
            Tensor::new(x.shape().to_vec(), d)?
        }
        Op::Normalize { x, mean, inv_std } => {
            let x = val(x);
            if mean.len() != x.cols() {
                return Err(dim_err!(
                    "normalize: {} statistics for width {}",
                    mean.len(),
                    x.cols()
                ));
            }
            let d = x
                .data()
                .chunks(x.cols())
                .flat_map(|r| {
                    r.iter()
                        .zip(mean.iter())
                        .zip(inv_std.iter())
                        .map(|((v, u), s)| (v - u) * s)
                })
                .collect();
            Tensor::new(x.shape().to_vec(), d)?
        }
        Op::Sum(x) => Tensor::scalar(val(x).data().iter().sum()),
        Op::Mean(x) => {
            let x = val(x);
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Op::BceWithLogits { logits, labels } => {
            let z = val(logits);
            if z.len() != labels.len() {
                return Err(dim_err!(
                    "bce: {} logits for {} labels",
                    z.len(),
                    labels.len()
                ));
            }
            let total: f64 = z
                .data()
                .iter()
                .zip(labels.iter())
                .map(|(&zi, &y)| bce_term(sigmoid(zi), y))
                .sum();
            Tensor::scalar(total / labels.len() as f64)
        }
    };
    if !out.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite value produced by {}",
            op.name()
        )));
    }
    Ok(out)
}

/// Cross-entropy of one probability against a 0/1 label, after clamping.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

fn concat_values(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("concat of zero parts"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(dim_err!("concat axis {axis} on rank {rank}"));
    }
    for p in parts {
        let ok = p.shape().len() == rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(dim_err!(
                "concat on axis {axis}: {:?} vs {:?}",
                p.shape(),
                first.shape()
            ));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut d = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            d.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, d)
}

/// Gradient of each named parameter, keyed by name.
pub fn param_grads(graph: &Graph, grads: &mut Gradients) -> HashMap<String, Tensor> {
    graph
        .params()
        .iter()
        .filter_map(|(name, id)| grads.take(*id).map(|g| (name.clone(), g)))
        .collect()
}
