//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass in
//! creation order, which is a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates adjoints into the [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{
    self, axis_split, broadcast_offsets, check_axis, gemm, inverse_permutation, matmul_plan, numel,
    MatRef, Precision, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with a gradient slot and a trainable flag.
#[derive(Clone, Debug)]
pub struct Variable {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Variable {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Variable {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }
}

/// Owning collection of [`Variable`]s addressed by [`ParamId`] or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    vars: Vec<Variable>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.vars.len());
        self.by_name.insert(name.clone(), id);
        self.vars.push(Variable::new(name, value, trainable));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Variable {
        &self.vars[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Variable {
        &mut self.vars[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Variable> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Variable)> {
        self.vars.iter().enumerate().map(|(i, v)| (ParamId(i), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Variable)> {
        self.vars
            .iter_mut()
            .enumerate()
            .map(|(i, v)| (ParamId(i), v))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, v)| v.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, v)| v.trainable)
            .map(|(_, v)| v.name.clone())
            .collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.vars
            .iter()
            .filter(|v| v.trainable)
            .map(|v| v.value.numel())
            .sum()
    }

    pub fn count_frozen(&self) -> usize {
        self.vars
            .iter()
            .filter(|v| !v.trainable)
            .map(|v| v.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for v in &mut self.vars {
            v.grad.fill(0.0);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for v in &mut self.vars {
            v.trainable = trainable;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    pub precision: Precision,
    /// Fail on the first op that produces NaN or Inf.
    pub check_finite: bool,
    /// Frozen parameters do not require gradients; backward skips them.
    pub stop_grad_frozen: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            precision: Precision::F64,
            check_finite: true,
            stop_grad_frozen: false,
        }
    }
}

impl GraphOptions {
    /// Settings for training loops: no finiteness scan, no frozen grads.
    pub fn training(precision: Precision) -> Self {
        GraphOptions {
            precision,
            check_finite: false,
            stop_grad_frozen: true,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Expand(NodeId),
    Mean(NodeId, usize),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    Gate {
        orig: NodeId,
        extra: NodeId,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Op-specific forward cache (normalised rows, softmax probabilities, ...).
    aux: Vec<f64>,
}

/// Records a forward pass for later differentiation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    opts: GraphOptions,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Adjoints produced by [`Graph::backward`] for every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }
}

fn name_of(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Affine(..) => "affine",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(_) => "reshape",
        Op::Permute(..) => "permute",
        Op::Expand(_) => "expand",
        Op::Mean(..) => "mean",
        Op::Sum(_) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Gate { .. } => "gate",
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::with_options(GraphOptions::default())
    }

    pub fn with_options(opts: GraphOptions) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            opts,
        }
    }

    pub fn options(&self) -> GraphOptions {
        self.opts
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, aux: Vec<f64>) -> Result<NodeId> {
        self.opts.precision.round_slice(value.data_mut());
        if self.opts.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name_of(&op) });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::Param(_) => false,
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Ok(id)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        let mut value = value;
        self.opts.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            aux: Vec::new(),
        });
        id
    }

    /// Free input whose adjoint is reported in [`Gradients`].
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = self.constant(value);
        self.nodes[id.0].requires_grad = true;
        id
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let var = store.get(id);
        let node = NodeId(self.nodes.len());
        let mut value = var.value.clone();
        self.opts.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: var.trainable || !self.opts.stop_grad_frozen,
            aux: Vec::new(),
        });
        self.params.insert(id, node);
        node
    }

    // -- primitives ---------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul_with(self.value(a), self.value(b), self.opts.precision)?;
        self.push(v, Op::MatMul(a, b), Vec::new())
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: fn(f64, f64) -> f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let v = va.broadcast_zip(vb, f)?;
        self.push(v, op, Vec::new())
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `alpha * x + beta` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, alpha: f64, beta: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| alpha * t + beta);
        self.push(v, Op::Affine(x, alpha), Vec::new())
    }

    pub fn scale(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        self.affine(x, alpha, 0.0)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = tensor::softmax(self.value(x), axis)?;
        self.push(v, Op::Softmax(x, axis), Vec::new())
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let out = tensor::layer_norm(vx, vg, vb, tensor::LN_EPS)?;
        let (xhat, inv_std) = tensor::layer_norm_core(vx, tensor::LN_EPS);
        let mut aux = xhat;
        aux.extend(inv_std);
        self.push(out, Op::LayerNorm { x, gamma, beta }, aux)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let t: Vec<f64> = vx.data().iter().map(|&a| tensor::gelu_tanh(a)).collect();
        let v = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data()
                .iter()
                .zip(&t)
                .map(|(&a, &th)| 0.5 * a * (1.0 + th))
                .collect(),
        );
        self.push(v, Op::Gelu(x), t)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::relu(self.value(x));
        self.push(v, Op::Relu(x), Vec::new())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::sigmoid(self.value(x));
        self.push(v, Op::Sigmoid(x), Vec::new())
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat(&refs, axis)?;
        self.push(v, Op::Concat(parts.to_vec(), axis), Vec::new())
    }

    pub fn slice(&mut self, src: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = tensor::slice_axis(self.value(src), axis, start, len)?;
        self.push(v, Op::Slice { src, axis, start }, Vec::new())
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), Vec::new())
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = tensor::permute(self.value(x), perm)?;
        self.push(v, Op::Permute(x, perm.to_vec()), Vec::new())
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::dim("transpose", format!("rank {n} < 2")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    /// Repeats `x` along new leading axes: output shape `lead ++ shape(x)`.
    pub fn expand(&mut self, x: NodeId, lead: &[usize]) -> Result<NodeId> {
        let src = self.value(x);
        let reps = numel(lead);
        let mut shape = lead.to_vec();
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(reps * src.numel());
        for _ in 0..reps {
            data.extend_from_slice(src.data());
        }
        let v = Tensor::new(&shape, data)?;
        self.push(v, Op::Expand(x), Vec::new())
    }

    /// Mean along `axis`; the axis is removed.
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let src = self.value(x);
        check_axis(src.shape(), axis, "mean")?;
        let (outer, len, inner) = axis_split(src.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::from_parts(shape, data);
        self.push(v, Op::Mean(x, axis), Vec::new())
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), Vec::new())
    }

    /// Mean softmax cross-entropy of `logits [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let [b, c] = lv.shape() else {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits must be [batch, classes], got {:?}", lv.shape()),
            ));
        };
        let (b, c) = (*b, *c);
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for batch {b} with {c} classes", labels.len()),
            ));
        }
        let probs = tensor::softmax(lv, 1)?;
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &lv.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let v = Tensor::scalar(loss / b as f64);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            probs.into_data(),
        )
    }

    /// Softmax-mass gate `S_extra / (S_orig + S_extra)` per row of two score
    /// groups that share every axis but the last. Output keeps a trailing 1.
    pub fn gate(&mut self, orig: NodeId, extra: NodeId) -> Result<NodeId> {
        self.gate_with(orig, extra, true)
    }

    /// Gate with per-group max subtraction; a deliberately wrong variant for
    /// negative controls. Its backward uses the exact-gate rule.
    pub fn gate_unshared(&mut self, orig: NodeId, extra: NodeId) -> Result<NodeId> {
        self.gate_with(orig, extra, false)
    }

    fn gate_with(&mut self, orig: NodeId, extra: NodeId, shared: bool) -> Result<NodeId> {
        let (v, _, _) = tensor::gate_rows(self.value(orig), self.value(extra), shared)?;
        self.push(v, Op::Gate { orig, extra }, Vec::new())
    }

    // -- backward -----------------------------------------------------------

    /// Accumulates d`loss`/dθ into every reachable parameter's `grad` and
    /// returns the adjoints of all recorded nodes.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            if let Op::Param(pid) = node.op {
                store.get_mut(pid).grad.add_assign(&g)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, mut g: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        self.opts.precision.round_slice(g.data_mut());
        match &mut grads[target.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reduces a broadcast adjoint back onto an operand's shape.
    fn unbroadcast(&self, g: &Tensor, target: NodeId, scale: Option<&[f64]>) -> Tensor {
        let shape = self.shape(target);
        if shape == g.shape() {
            return match scale {
                Some(s) => Tensor::from_parts(
                    shape.to_vec(),
                    g.data().iter().zip(s).map(|(a, b)| a * b).collect(),
                ),
                None => g.clone(),
            };
        }
        let mut out = vec![0.0; numel(shape)];
        if tensor::is_suffix(shape, g.shape()) {
            let n = out.len();
            for (c, chunk) in g.data().chunks(n).enumerate() {
                match scale {
                    Some(s) => {
                        for ((o, &a), &b) in out.iter_mut().zip(chunk).zip(&s[c * n..(c + 1) * n]) {
                            *o += a * b;
                        }
                    }
                    None => out.iter_mut().zip(chunk).for_each(|(o, &a)| *o += a),
                }
            }
            return Tensor::from_parts(shape.to_vec(), out);
        }
        let offs = broadcast_offsets(g.shape(), shape);
        for (k, &o) in offs.iter().enumerate() {
            out[o] += g.data()[k] * scale.map_or(1.0, |s| s[k]);
        }
        Tensor::from_parts(shape.to_vec(), out)
    }

    /// Operand values broadcast to the output shape of a binary node.
    fn broadcast_value(&self, src: NodeId, out_shape: &[usize]) -> Vec<f64> {
        let v = self.value(src);
        if v.shape() == out_shape {
            return v.data().to_vec();
        }
        if tensor::is_suffix(v.shape(), out_shape) {
            let total = numel(out_shape);
            return v.data().iter().copied().cycle().take(total).collect();
        }
        broadcast_offsets(out_shape, v.shape())
            .into_iter()
            .map(|o| v.data()[o])
            .collect()
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let p = self.opts.precision;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let plan = matmul_plan(va.shape(), vb.shape())?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.wants(*a) {
                    let mut ga = vec![0.0; va.numel()];
                    if vb.ndim() == 2 {
                        let rows = va.numel() / k;
                        gemm(
                            rows,
                            n,
                            k,
                            MatRef::row_major(g.data(), n),
                            MatRef::transposed(vb.data(), n),
                            &mut ga,
                            0.0,
                            p,
                        );
                    } else {
                        for (bi, (&ai, &bj)) in plan.a_index.iter().zip(&plan.b_index).enumerate() {
                            gemm(
                                m,
                                n,
                                k,
                                MatRef::row_major(&g.data()[bi * m * n..], n),
                                MatRef::transposed(&vb.data()[bj * k * n..], n),
                                &mut ga[ai * m * k..],
                                1.0,
                                p,
                            );
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; vb.numel()];
                    if vb.ndim() == 2 {
                        let rows = va.numel() / k;
                        gemm(
                            k,
                            rows,
                            n,
                            MatRef::transposed(va.data(), k),
                            MatRef::row_major(g.data(), n),
                            &mut gb,
                            0.0,
                            p,
                        );
                    } else {
                        for (bi, (&ai, &bj)) in plan.a_index.iter().zip(&plan.b_index).enumerate() {
                            gemm(
                                k,
                                m,
                                n,
                                MatRef::transposed(&va.data()[ai * m * k..], k),
                                MatRef::row_major(&g.data()[bi * m * n..], n),
                                &mut gb[bj * k * n..],
                                1.0,
                                p,
                            );
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    let ga = self.unbroadcast(g, *a, None);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.unbroadcast(g, *b, None);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let ga = self.unbroadcast(g, *a, None);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.unbroadcast(g, *b, None).scale(-1.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = self.broadcast_value(*b, g.shape());
                    let ga = self.unbroadcast(g, *a, Some(&vb));
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let va = self.broadcast_value(*a, g.shape());
                    let gb = self.unbroadcast(g, *b, Some(&va));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Affine(x, alpha) => {
                self.accumulate(grads, *x, g.scale(*alpha));
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + j;
                        let dot: f64 = (0..len).map(|t| g.data()[at(t)] * y.data()[at(t)]).sum();
                        for t in 0..len {
                            gx[at(t)] = y.data()[at(t)] * (g.data()[at(t)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let shape = node.value.shape();
                let d = *shape.last().unwrap();
                let rows = node.value.numel() / d;
                let (xhat, inv_std) = node.aux.split_at(rows * d);
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g.data()[r * d + c] * xhat[r * d + c];
                            gbeta[c] += g.data()[r * d + c];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_parts(vec![d], gg));
                    self.accumulate(grads, *beta, Tensor::from_parts(vec![d], gbeta));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..d).map(|c| g.data()[r * d + c] * gv[c]).collect();
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx =
                            gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] = inv_std[r] * (gh[c] - mean_gh - xh[c] * mean_ghx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), gx));
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(&node.aux)
                    .zip(g.data())
                    .map(|((&v, &t), &gv)| gv * tensor::gelu_grad_from_tanh(v, t))
                    .collect();
                let gx = Tensor::from_parts(vx.shape().to_vec(), data);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx = vx.zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = node.value.zip_map(g, |s, gv| gv * s * (1.0 - s))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[*axis]).collect();
                let pieces = tensor::split(g, *axis, &sizes)?;
                for (p, piece) in parts.iter().zip(pieces) {
                    self.accumulate(grads, *p, piece);
                }
            }
            Op::Slice { src, axis, start } => {
                let full = self.shape(*src);
                let (outer, len_full, inner) = axis_split(full, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; numel(full)];
                for o in 0..outer {
                    let dst = (o * len_full + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *src, Tensor::from_parts(full.to_vec(), gx));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.shape(*x))?);
            }
            Op::Permute(x, perm) => {
                let gx = tensor::permute(g, &inverse_permutation(perm))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Expand(x) => {
                let n = self.value(*x).numel();
                let mut gx = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (a, b) in gx.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::Mean(x, axis) => {
                let full = self.shape(*x);
                let (outer, len, inner) = axis_split(full, *axis);
                let mut gx = vec![0.0; numel(full)];
                for o in 0..outer {
                    for j in 0..len {
                        for t in 0..inner {
                            gx[(o * len + j) * inner + t] = g.data()[o * inner + t] / len as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(full.to_vec(), gx));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::CrossEntropy { logits, labels } => {
                let shape = self.shape(*logits);
                let (b, c) = (shape[0], shape[1]);
                let scale = g.data()[0] / b as f64;
                let mut gx = node.aux.clone();
                for (row, &l) in labels.iter().enumerate() {
                    gx[row * c + l] -= 1.0;
                }
                gx.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::from_parts(shape.to_vec(), gx));
            }
            Op::Gate { orig, extra } => {
                // lambda = S_e / Z; d/ds_o = -lambda * w_o, d/ds_e = (1 - lambda) * w_e
                // where w = exp(s - M) / Z are the joint softmax weights.
                let (vo, ve) = (self.value(*orig), self.value(*extra));
                let (lam, shift, denom) = tensor::gate_rows(vo, ve, true)?;
                let n = *vo.shape().last().unwrap();
                let m = *ve.shape().last().unwrap();
                let rows = lam.numel();
                let mut go = vec![0.0; vo.numel()];
                let mut ge = vec![0.0; ve.numel()];
                for r in 0..rows {
                    let (l, s, z, gr) = (lam.data()[r], shift[r], denom[r], g.data()[r]);
                    for j in 0..n {
                        let w = (vo.data()[r * n + j] - s).exp() / z;
                        go[r * n + j] = -gr * l * w;
                    }
                    for j in 0..m {
                        let w = (ve.data()[r * m + j] - s).exp() / z;
                        ge[r * m + j] = gr * (1.0 - l) * w;
                    }
                }
                self.accumulate(grads, *orig, Tensor::from_parts(vo.shape().to_vec(), go));
                self.accumulate(grads, *extra, Tensor::from_parts(ve.shape().to_vec(), ge));
            }
        }
        Ok(())
    }
}

fn parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Param(_) => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Affine(x, _)
        | Op::Softmax(x, _)
        | Op::Gelu(x)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::Expand(x)
        | Op::Mean(x, _)
        | Op::Sum(x) => vec![*x],
        Op::Slice { src, .. } => vec![*src],
        Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
        Op::Concat(parts, _) => parts.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Gate { orig, extra } => vec![*orig, *extra],
    }
}
