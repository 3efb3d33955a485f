// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static computation graph with forward evaluation and reverse-mode
//! differentiation.
//!
//! Nodes are appended in topological order by construction: a node may only
//! reference nodes that already exist. Parameters are looked up by name in a
//! [`Params`] store at evaluation time, so one graph can be re-evaluated for
//! every training step.

use std::collections::BTreeMap;

use super::kernels::{self, dot};
use super::tensor::Tensor;
use crate::error::{ForgeError, Result};

pub type NodeId = usize;

/// Named parameter tensors. Ordered so iteration is deterministic.
pub type Params = BTreeMap<String, Tensor>;

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => kernels::gelu(x),
            Activation::Silu => kernels::silu(x),
            Activation::Sigmoid => kernels::sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Silu => kernels::silu_grad(x),
            Activation::Sigmoid => {
                let s = kernels::sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Operation table.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Externally bound tensor.
    Input(String),
    /// Trainable tensor looked up in [`Params`].
    Param(String),
    /// `[m,k]·[k,n]`, or `[m,k]·[n,k]ᵀ` when `trans_b`.
    MatMul { trans_b: bool },
    /// Grouped matmul over `[g,m,k]` and `[g,k,n]` (or `[g,n,k]` when `trans_b`).
    BatchMatMul { trans_b: bool },
    Add,
    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    AddBias,
    Mul,
    Scale(f64),
    Activation(Activation),
    /// Softmax over the last axis. With `causal`, input must be `[.., t, t]`
    /// and row `i` only sees columns `0..=i`.
    Softmax { causal: bool },
    /// Inputs: x `[.., d]`, gain `[d]`.
    RmsNorm { eps: f64 },
    /// Inputs: x `[.., d]`, gain `[d]`, bias `[d]`.
    LayerNorm { eps: f64 },
    /// Inputs: table `[v,d]`, integer-valued ids `[n]`.
    Embedding,
    /// Concatenation of 2-D tensors along axis 0 or 1.
    Concat { axis: usize },
    /// Contiguous slice of a 2-D tensor along axis 0 or 1.
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Gather rows of a 2-D tensor.
    SelectRows(Vec<usize>),
    /// `[b·t, h·dh]` → `[b·h, t, dh]`.
    SplitHeads { batch: usize, seq: usize, heads: usize },
    /// Inverse of [`Op::SplitHeads`].
    MergeHeads { batch: usize, seq: usize, heads: usize },
    /// Sum of all entries, shape `[1]`.
    Sum,
    /// Mean cross-entropy of logits `[m,v]` against integer targets `[m]`.
    CrossEntropy,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add => "add",
            Op::AddBias => "add_bias",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Activation(_) => "activation",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SelectRows(_) => "select_rows",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Sum => "sum",
            Op::CrossEntropy => "cross_entropy",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input(_) | Op::Param(_) => 0,
            Op::Scale(_)
            | Op::Activation(_)
            | Op::Softmax { .. }
            | Op::Slice { .. }
            | Op::SelectRows(_)
            | Op::SplitHeads { .. }
            | Op::MergeHeads { .. }
            | Op::Sum => 1,
            Op::LayerNorm { .. } => 3,
            Op::Concat { .. } => 2,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Append-only DAG of operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Append a node. Panics if an input id does not precede it or the arity
    /// is wrong; both are programming errors in graph construction.
    pub fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        assert!(
            inputs.iter().all(|&i| i < id),
            "node {id} references a later node"
        );
        assert_eq!(inputs.len(), op.arity(), "wrong arity for {}", op.name());
        self.nodes.push(Node { op, inputs });
        id
    }

    pub fn mark_output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()), vec![])
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param(name.to_string()), vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { trans_b: false }, vec![a, b])
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { trans_b: true }, vec![a, b])
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        self.push(Op::BatchMatMul { trans_b }, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias, vec![x, bias])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(factor), vec![x])
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        self.push(Op::Activation(kind), vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn softmax(&mut self, x: NodeId, causal: bool) -> NodeId {
        self.push(Op::Softmax { causal }, vec![x])
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> NodeId {
        self.push(Op::RmsNorm { eps }, vec![x, gain])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { eps }, vec![x, gain, bias])
    }

    pub fn embedding(&mut self, table: NodeId, ids: NodeId) -> NodeId {
        self.push(Op::Embedding, vec![table, ids])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> NodeId {
        self.push(Op::Concat { axis }, vec![a, b])
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { axis, start, len }, vec![x])
    }

    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::SelectRows(rows), vec![x])
    }

    pub fn split_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> NodeId {
        self.push(Op::SplitHeads { batch, seq, heads }, vec![x])
    }

    pub fn merge_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> NodeId {
        self.push(Op::MergeHeads { batch, seq, heads }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::CrossEntropy, vec![logits, targets])
    }
}

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }
}

/// Evaluate a graph and return the named outputs.
pub fn forward(
    graph: &Graph,
    params: &Params,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    let eval = evaluate(graph, params, inputs)?;
    Ok(graph
        .outputs
        .iter()
        .map(|(name, &id)| (name.clone(), eval.values[id].clone()))
        .collect())
}

/// Evaluate every node in order.
pub fn evaluate(
    graph: &Graph,
    params: &Params,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<Evaluation> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (id, node) in graph.nodes.iter().enumerate() {
        let args: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
        let out = eval_node(id, &node.op, &args, params, inputs)?;
        if !out.all_finite() {
            return Err(ForgeError::NonFinite {
                node: id,
                op: node.op.name(),
            });
        }
        values.push(out);
    }
    Ok(Evaluation { values })
}

fn shape_err(node: usize, op: &Op, detail: impl Into<String>) -> ForgeError {
    ForgeError::Shape {
        node,
        op: op.name(),
        detail: detail.into(),
    }
}

fn dims2(node: usize, op: &Op, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(node, op, format!("expected 2-D operand, got {s:?}"))),
    }
}

fn dims3(node: usize, op: &Op, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [g, r, c] => Ok((*g, *r, *c)),
        s => Err(shape_err(node, op, format!("expected 3-D operand, got {s:?}"))),
    }
}

fn as_index(node: usize, op: &Op, v: f64, bound: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= bound {
        return Err(shape_err(node, op, format!("index {v} not an integer in [0, {bound})")));
    }
    Ok(v as usize)
}

fn causal_shape(node: usize, op: &Op, x: &Tensor) -> Result<usize> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(shape_err(node, op, format!("causal softmax needs [.., t, t], got {s:?}")));
    }
    Ok(s[s.len() - 1])
}

fn eval_node(
    node: usize,
    op: &Op,
    args: &[&Tensor],
    params: &Params,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<Tensor> {
    let out = match op {
        Op::Input(name) => inputs
            .get(name)
            .cloned()
            .ok_or_else(|| shape_err(node, op, format!("input '{name}' is not bound")))?,
        Op::Param(name) => params
            .get(name)
            .cloned()
            .ok_or_else(|| shape_err(node, op, format!("parameter '{name}' is missing")))?,
        Op::MatMul { trans_b } => {
            let (m, k) = dims2(node, op, args[0])?;
            let (br, bc) = dims2(node, op, args[1])?;
            let (kb, n) = if *trans_b { (bc, br) } else { (br, bc) };
            if k != kb {
                return Err(shape_err(
                    node,
                    op,
                    format!("inner dims differ: {:?} vs {:?}", args[0].shape(), args[1].shape()),
                ));
            }
            let data = if *trans_b {
                kernels::matmul_nt(args[0].data(), args[1].data(), m, k, n)
            } else {
                kernels::matmul(args[0].data(), args[1].data(), m, k, n)
            };
            Tensor::new(vec![m, n], data)?
        }
        Op::BatchMatMul { trans_b } => {
            let (g, m, k) = dims3(node, op, args[0])?;
            let (gb, br, bc) = dims3(node, op, args[1])?;
            let (kb, n) = if *trans_b { (bc, br) } else { (br, bc) };
            if g != gb || k != kb {
                return Err(shape_err(
                    node,
                    op,
                    format!("incompatible {:?} vs {:?}", args[0].shape(), args[1].shape()),
                ));
            }
            let mut data = Vec::with_capacity(g * m * n);
            for gi in 0..g {
                let a = &args[0].data()[gi * m * k..(gi + 1) * m * k];
                let b = &args[1].data()[gi * k * n..(gi + 1) * k * n];
                if *trans_b {
                    data.extend(kernels::matmul_nt(a, b, m, k, n));
                } else {
                    data.extend(kernels::matmul(a, b, m, k, n));
                }
            }
            Tensor::new(vec![g, m, n], data)?
        }
        Op::Add | Op::Mul => {
            if args[0].shape() != args[1].shape() {
                return Err(shape_err(
                    node,
                    op,
                    format!("{:?} vs {:?}", args[0].shape(), args[1].shape()),
                ));
            }
            let data = args[0]
                .data()
                .iter()
                .zip(args[1].data())
                .map(|(a, b)| if *op == Op::Add { a + b } else { a * b })
                .collect();
            Tensor::new(args[0].shape().to_vec(), data)?
        }
        Op::AddBias => {
            let (_, cols) = args[0].rows_cols();
            if args[1].shape() != [cols] {
                return Err(shape_err(
                    node,
                    op,
                    format!("bias {:?} does not match {:?}", args[1].shape(), args[0].shape()),
                ));
            }
            let mut out = args[0].clone();
            let bias = args[1].data();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bias[i % cols];
            }
            out
        }
        Op::Scale(f) => {
            let mut out = args[0].clone();
            out.data_mut().iter_mut().for_each(|v| *v *= f);
            out
        }
        Op::Activation(kind) => {
            let mut out = args[0].clone();
            out.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
            out
        }
        Op::Softmax { causal } => {
            let mut out = args[0].clone();
            let (rows, cols) = out.rows_cols();
            if *causal {
                let t = causal_shape(node, op, args[0])?;
                for r in 0..rows {
                    kernels::masked_softmax_in_place(out.row_mut(r), r % t + 1);
                }
            } else {
                for r in 0..rows {
                    kernels::softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
                }
            }
            out
        }
        Op::RmsNorm { eps } => {
            let (rows, cols) = args[0].rows_cols();
            if args[1].shape() != [cols] {
                return Err(shape_err(node, op, "gain must match the last axis"));
            }
            let mut out = Tensor::zeros(args[0].shape());
            for r in 0..rows {
                kernels::rms_norm_row(args[0].row(r), args[1].data(), *eps, out.row_mut(r));
            }
            out
        }
        Op::LayerNorm { eps } => {
            let (rows, cols) = args[0].rows_cols();
            if args[1].shape() != [cols] || args[2].shape() != [cols] {
                return Err(shape_err(node, op, "gain and bias must match the last axis"));
            }
            let mut out = Tensor::zeros(args[0].shape());
            for r in 0..rows {
                kernels::layer_norm_row(
                    args[0].row(r),
                    args[1].data(),
                    args[2].data(),
                    *eps,
                    out.row_mut(r),
                );
            }
            out
        }
        Op::Embedding => {
            let (v, d) = dims2(node, op, args[0])?;
            let ids = args[1].data();
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                let i = as_index(node, op, id, v)?;
                data.extend_from_slice(args[0].row(i));
            }
            Tensor::new(vec![ids.len(), d], data)?
        }
        Op::Concat { axis } => {
            let (ar, ac) = dims2(node, op, args[0])?;
            let (br, bc) = dims2(node, op, args[1])?;
            match axis {
                0 if ac == bc => {
                    let mut data = args[0].data().to_vec();
                    data.extend_from_slice(args[1].data());
                    Tensor::new(vec![ar + br, ac], data)?
                }
                1 if ar == br => {
                    let mut data = Vec::with_capacity(ar * (ac + bc));
                    for r in 0..ar {
                        data.extend_from_slice(args[0].row(r));
                        data.extend_from_slice(args[1].row(r));
                    }
                    Tensor::new(vec![ar, ac + bc], data)?
                }
                _ => {
                    return Err(shape_err(
                        node,
                        op,
                        format!(
                            "cannot concat {:?} and {:?} on axis {axis}",
                            args[0].shape(),
                            args[1].shape()
                        ),
                    ))
                }
            }
        }
        Op::Slice { axis, start, len } => {
            let (r, c) = dims2(node, op, args[0])?;
            let extent = if *axis == 0 { r } else { c };
            if *axis > 1 || *len == 0 || start + len > extent {
                return Err(shape_err(
                    node,
                    op,
                    format!("slice {start}..{} out of {extent} on axis {axis}", start + len),
                ));
            }
            if *axis == 0 {
                Tensor::new(vec![*len, c], args[0].data()[start * c..(start + len) * c].to_vec())?
            } else {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&args[0].row(i)[*start..start + len]);
                }
                Tensor::new(vec![r, *len], data)?
            }
        }
        Op::SelectRows(rows) => {
            let (r, c) = dims2(node, op, args[0])?;
            if rows.is_empty() || rows.iter().any(|&i| i >= r) {
                return Err(shape_err(node, op, format!("row selection out of {r} rows")));
            }
            let mut data = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                data.extend_from_slice(args[0].row(i));
            }
            Tensor::new(vec![rows.len(), c], data)?
        }
        Op::SplitHeads { batch, seq, heads } => {
            let (r, c) = dims2(node, op, args[0])?;
            if r != batch * seq || c % heads != 0 {
                return Err(shape_err(node, op, format!("cannot split {:?}", args[0].shape())));
            }
            let dh = c / heads;
            let data = split_heads_data(args[0].data(), *batch, *seq, *heads, dh);
            Tensor::new(vec![batch * heads, *seq, dh], data)?
        }
        Op::MergeHeads { batch, seq, heads } => {
            let (g, t, dh) = dims3(node, op, args[0])?;
            if g != batch * heads || t != *seq {
                return Err(shape_err(node, op, format!("cannot merge {:?}", args[0].shape())));
            }
            let c = heads * dh;
            let data = merge_heads_data(args[0].data(), *batch, *seq, *heads, dh);
            Tensor::new(vec![batch * seq, c], data)?
        }
        Op::Sum => Tensor::scalar(args[0].sum()),
        Op::CrossEntropy => {
            let (m, v) = dims2(node, op, args[0])?;
            if args[1].len() != m {
                return Err(shape_err(node, op, format!("{} targets for {m} rows", args[1].len())));
            }
            let mut total = 0.0;
            for r in 0..m {
                let t = as_index(node, op, args[1].data()[r], v)?;
                total -= kernels::log_softmax(args[0].row(r))[t];
            }
            Tensor::scalar(total / m as f64)
        }
    };
    Ok(out)
}

/// Reverse-mode gradients of a scalar node with respect to every parameter
/// in `params`. Parameters the loss does not reach get zero tensors.
pub fn backward(
    graph: &Graph,
    eval: &Evaluation,
    params: &Params,
    loss: NodeId,
) -> Result<BTreeMap<String, Tensor>> {
    let loss_value = &eval.values[loss];
    if loss_value.len() != 1 {
        return Err(shape_err(
            loss,
            &graph.nodes[loss].op,
            format!("loss must be scalar, got {:?}", loss_value.shape()),
        ));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; loss + 1];
    grads[loss] = Some(Tensor::full(loss_value.shape(), 1.0));
    let mut param_grads: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();

    for id in (0..=loss).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &graph.nodes[id];
        match &node.op {
            Op::Input(_) => continue,
            Op::Param(name) => {
                if let Some(acc) = param_grads.get_mut(name) {
                    accumulate(acc, &g);
                }
                continue;
            }
            _ => {}
        }
        let args: Vec<&Tensor> = node.inputs.iter().map(|&i| &eval.values[i]).collect();
        let input_grads = vjp(&node.op, &args, &eval.values[id], &g);
        for (&input, ig) in node.inputs.iter().zip(input_grads) {
            if let Some(ig) = ig {
                match &mut grads[input] {
                    Some(acc) => accumulate(acc, &ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
    }
    Ok(param_grads)
}

fn accumulate(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("gradient shape mirrors forward shape")
}

/// Vector-Jacobian products. Shapes were validated during the forward pass.
fn vjp(op: &Op, args: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Input(_) | Op::Param(_) => vec![],
        Op::MatMul { trans_b } => {
            let (m, k) = args[0].rows_cols();
            let n = out.shape()[1];
            let (a, b, gd) = (args[0].data(), args[1].data(), g.data());
            if *trans_b {
                vec![
                    Some(like(args[0], kernels::matmul(gd, b, m, n, k))),
                    Some(like(args[1], kernels::matmul_tn(gd, a, n, m, k))),
                ]
            } else {
                vec![
                    Some(like(args[0], kernels::matmul_nt(gd, b, m, n, k))),
                    Some(like(args[1], kernels::matmul_tn(a, gd, k, m, n))),
                ]
            }
        }
        Op::BatchMatMul { trans_b } => {
            let (grp, m, k) = (args[0].shape()[0], args[0].shape()[1], args[0].shape()[2]);
            let n = out.shape()[2];
            let mut ga = Vec::with_capacity(args[0].len());
            let mut gb = Vec::with_capacity(args[1].len());
            for gi in 0..grp {
                let a = &args[0].data()[gi * m * k..(gi + 1) * m * k];
                let b = &args[1].data()[gi * k * n..(gi + 1) * k * n];
                let gd = &g.data()[gi * m * n..(gi + 1) * m * n];
                if *trans_b {
                    ga.extend(kernels::matmul(gd, b, m, n, k));
                    gb.extend(kernels::matmul_tn(gd, a, n, m, k));
                } else {
                    ga.extend(kernels::matmul_nt(gd, b, m, n, k));
                    gb.extend(kernels::matmul_tn(a, gd, k, m, n));
                }
            }
            vec![Some(like(args[0], ga)), Some(like(args[1], gb))]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::AddBias => {
            let (rows, cols) = g.rows_cols();
            let mut gb = vec![0.0; cols];
            for r in 0..rows {
                for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(like(args[1], gb))]
        }
        Op::Mul => {
            let ga = g.data().iter().zip(args[1].data()).map(|(g, b)| g * b).collect();
            let gb = g.data().iter().zip(args[0].data()).map(|(g, a)| g * a).collect();
            vec![Some(like(args[0], ga)), Some(like(args[1], gb))]
        }
        Op::Scale(f) => vec![Some(like(g, g.data().iter().map(|v| v * f).collect()))],
        Op::Activation(kind) => {
            let gx = g
                .data()
                .iter()
                .zip(args[0].data())
                .map(|(g, x)| g * kind.derivative(*x))
                .collect();
            vec![Some(like(args[0], gx))]
        }
        Op::Softmax { .. } => {
            let (rows, _) = out.rows_cols();
            let mut gx = Vec::with_capacity(out.len());
            for r in 0..rows {
                let y = out.row(r);
                let gy = g.row(r);
                let s = dot(gy, y);
                gx.extend(y.iter().zip(gy).map(|(y, gy)| y * (gy - s)));
            }
            vec![Some(like(args[0], gx))]
        }
        Op::RmsNorm { eps } => {
            let (rows, cols) = args[0].rows_cols();
            let gain = args[1].data();
            let mut gx = Vec::with_capacity(args[0].len());
            let mut gg = vec![0.0; cols];
            for r in 0..rows {
                let x = args[0].row(r);
                let gy = g.row(r);
                let ms = x.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                let mut dn_dot_n = 0.0;
                for j in 0..cols {
                    let n = x[j] * inv;
                    gg[j] += gy[j] * n;
                    dn_dot_n += gy[j] * gain[j] * n;
                }
                let mean = dn_dot_n / cols as f64;
                gx.extend((0..cols).map(|j| inv * (gy[j] * gain[j] - x[j] * inv * mean)));
            }
            vec![Some(like(args[0], gx)), Some(like(args[1], gg))]
        }
        Op::LayerNorm { eps } => {
            let (rows, cols) = args[0].rows_cols();
            let gain = args[1].data();
            let nf = cols as f64;
            let mut gx = Vec::with_capacity(args[0].len());
            let mut gg = vec![0.0; cols];
            let mut gbias = vec![0.0; cols];
            for r in 0..rows {
                let x = args[0].row(r);
                let gy = g.row(r);
                let mean = x.iter().sum::<f64>() / nf;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let inv = 1.0 / (var + eps).sqrt();
                let mut sum_dn = 0.0;
                let mut sum_dn_n = 0.0;
                for j in 0..cols {
                    let n = (x[j] - mean) * inv;
                    gg[j] += gy[j] * n;
                    gbias[j] += gy[j];
                    let dn = gy[j] * gain[j];
                    sum_dn += dn;
                    sum_dn_n += dn * n;
                }
                let (m1, m2) = (sum_dn / nf, sum_dn_n / nf);
                gx.extend((0..cols).map(|j| {
                    let n = (x[j] - mean) * inv;
                    inv * (gy[j] * gain[j] - m1 - n * m2)
                }));
            }
            vec![
                Some(like(args[0], gx)),
                Some(like(args[1], gg)),
                Some(like(args[2], gbias)),
            ]
        }
        Op::Embedding => {
            let mut gt = Tensor::zeros(args[0].shape());
            for (r, &id) in args[1].data().iter().enumerate() {
                let row = gt.row_mut(id as usize);
                for (acc, v) in row.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            vec![Some(gt), None]
        }
        Op::Concat { axis } => {
            let (ar, ac) = args[0].rows_cols();
            let (br, bc) = args[1].rows_cols();
            if *axis == 0 {
                let split = ar * ac;
                vec![
                    Some(like(args[0], g.data()[..split].to_vec())),
                    Some(like(args[1], g.data()[split..].to_vec())),
                ]
            } else {
                let mut ga = Vec::with_capacity(ar * ac);
                let mut gb = Vec::with_capacity(br * bc);
                for r in 0..ar {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ac]);
                    gb.extend_from_slice(&row[ac..]);
                }
                vec![Some(like(args[0], ga)), Some(like(args[1], gb))]
            }
        }
        Op::Slice { axis, start, len } => {
            let (r, c) = args[0].rows_cols();
            let mut gx = Tensor::zeros(args[0].shape());
            if *axis == 0 {
                gx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
            } else {
                for i in 0..r {
                    gx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
            }
            vec![Some(gx)]
        }
        Op::SelectRows(rows) => {
            let mut gx = Tensor::zeros(args[0].shape());
            for (k, &i) in rows.iter().enumerate() {
                for (acc, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                    *acc += v;
                }
            }
            vec![Some(gx)]
        }
        Op::SplitHeads { batch, seq, heads } => {
            let dh = args[0].shape()[1] / heads;
            let data = merge_heads_data(g.data(), *batch, *seq, *heads, dh);
            vec![Some(like(args[0], data))]
        }
        Op::MergeHeads { batch, seq, heads } => {
            let dh = args[0].shape()[2];
            let data = split_heads_data(g.data(), *batch, *seq, *heads, dh);
            vec![Some(like(args[0], data))]
        }
        Op::Sum => {
            let s = g.data()[0];
            vec![Some(Tensor::full(args[0].shape(), s))]
        }
        Op::CrossEntropy => {
            let (m, _) = args[0].rows_cols();
            let scale = g.data()[0] / m as f64;
            let mut gl = Vec::with_capacity(args[0].len());
            for r in 0..m {
                let mut p = kernels::softmax(args[0].row(r));
                p[args[1].data()[r] as usize] -= 1.0;
                gl.extend(p.into_iter().map(|v| v * scale));
            }
            vec![Some(like(args[0], gl)), None]
        }
    }
}

/// `[b·t, h·dh]` → `[b·h, t, dh]`.
fn split_heads_data(x: &[f64], batch: usize, seq: usize, heads: usize, dh: usize) -> Vec<f64> {
    let c = heads * dh;
    let mut data = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let src = (b * seq + t) * c + h * dh;
                let dst = ((b * heads + h) * seq + t) * dh;
                data[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    data
}

/// Inverse of [`split_heads_data`].
fn merge_heads_data(x: &[f64], batch: usize, seq: usize, heads: usize, dh: usize) -> Vec<f64> {
    let c = heads * dh;
    let mut data = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let dst = (b * seq + t) * c + h * dh;
                let src = ((b * heads + h) * seq + t) * dh;
                data[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    data
}
