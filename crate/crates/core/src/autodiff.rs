//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! after their inputs, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//!
//! Parameters are borrowed rather than copied: a graph built over a model's
//! weights lives for `'p` and never clones them.

use std::borrow::Cow;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{mish_grad, Activation, Scalar, Tensor};

/// Probabilities are clamped to this floor before taking the log in
/// [`Graph::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Reborrows an optional generator for one call, leaving it usable after.
pub fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Activation(NodeId, Activation),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: NodeId,
        multipliers: Tensor<T>,
    },
    MaskRows {
        x: NodeId,
        mask: Vec<bool>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    MeanRows {
        x: NodeId,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    Sum(NodeId),
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: Vec<NodeId>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[NodeId],
        name: &'static str,
    ) -> Result<NodeId> {
        let value = value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, requires_grad))
    }

    /// A differentiable input owned by the graph.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A borrowed trainable parameter. Registration order is preserved by
    /// [`Graph::param_nodes`].
    pub fn param(&mut self, value: &'p Tensor<T>) -> NodeId {
        let id = self.push(Cow::Borrowed(value), Op::Leaf, true);
        self.params.push(id);
        id
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node; zeros when nothing has flowed into it.
    pub fn grad(&self, id: NodeId) -> Tensor<T> {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn grad_ref(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Moves the parameter gradients out, in registration order.
    pub fn take_param_grads(&mut self) -> Vec<Tensor<T>> {
        let params = self.params.clone();
        params
            .into_iter()
            .map(|id| {
                let node = &mut self.nodes[id.0];
                node.grad
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push_op(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        self.push_op(v, Op::MatMulT(a, b), &[a, b], "matmul_t")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push_op(v, Op::Add(a, b), &[a, b], "add")
    }

    /// Broadcasts a bias of width `n` over the rows of `x [m×n]`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row(self.value(bias))?;
        self.push_op(v, Op::AddRow(x, bias), &[x, bias], "add_row")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        self.push_op(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let v = self.value(x).scale(factor);
        self.push_op(v, Op::Scale(x, factor), &[x], "scale")
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let v = self.value(x).activation(kind);
        self.push_op(v, Op::Activation(x, kind), &[x], "activation")
    }

    pub fn softmax_rows(&mut self, x: NodeId, key_mask: Option<&[bool]>) -> Result<NodeId> {
        let v = self.value(x).softmax_rows(key_mask)?;
        self.push_op(v, Op::Softmax(x), &[x], "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (v, normalized, inv_std) =
            self.value(x)
                .layer_norm_parts(self.value(gain), self.value(bias), eps)?;
        self.push_op(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    /// Inverted dropout. Without a generator (evaluation) or with `rate == 0`
    /// this is the identity and records nothing.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidInput(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::lit(1.0 / (1.0 - rate));
        let shape = self.value(x).shape().to_vec();
        let mut multipliers = Tensor::zeros(&shape);
        for m in multipliers.data_mut() {
            if rng.gen::<f64>() >= rate {
                *m = keep_scale;
            }
        }
        let v = self.value(x).mul(&multipliers)?;
        self.push_op(v, Op::Dropout { x, multipliers }, &[x], "dropout")
    }

    pub fn mask_rows(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let v = self.value(x).mask_rows(mask)?;
        self.push_op(
            v,
            Op::MaskRows {
                x,
                mask: mask.to_vec(),
            },
            &[x],
            "mask_rows",
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_cols(start, len)?;
        self.push_op(v, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&values)?;
        self.push_op(v, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Mean over valid rows, `[1×n]`.
    pub fn mean_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let v = self.value(x).mean_rows(mask)?;
        let count = mask.map_or(self.value(x).rows(), |m| m.iter().filter(|&&b| b).count());
        self.push_op(
            v,
            Op::MeanRows {
                x,
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
            &[x],
            "mean_rows",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push_op(v, Op::Sum(x), &[x], "sum")
    }

    /// Mean over the batch of `-ln max(p[label], PROB_FLOOR)` for a `[b×c]`
    /// tensor of probability rows.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let p = self.value(probs);
        if p.rank() != 2 || p.rows() != labels.len() {
            return Err(Error::dim("cross_entropy", p.shape(), &[labels.len()]));
        }
        let classes = p.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let floor = T::lit(PROB_FLOOR);
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p.get(i, l).max(floor).ln())
            .sum();
        let v = Tensor::scalar(total / T::lit(labels.len() as f64));
        self.push_op(
            v,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
            "cross_entropy",
        )
    }

    /// Accumulates `d loss / d node` into every node reachable from `loss`.
    /// Calling it twice without [`Graph::zero_grad`] adds the gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut upstream: Vec<Option<Tensor<T>>> = Vec::new();
        upstream.resize_with(loss.0 + 1, || None);
        upstream[loss.0] = Some(Tensor::ones(&shape));

        for i in (0..=loss.0).rev() {
            let Some(g) = upstream[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut upstream)?;
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, up: &mut [Option<Tensor<T>>]) -> Result<()> {
        fn send<T: Scalar>(up: &mut [Option<Tensor<T>>], id: NodeId, t: Tensor<T>) {
            match &mut up[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        }

        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    send(up, *a, g.matmul_t(self.value(*b))?);
                }
                if self.wants(*b) {
                    send(up, *b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    send(up, *a, g.matmul(self.value(*b))?);
                }
                if self.wants(*b) {
                    send(up, *b, g.t_matmul(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                send(up, *a, g.clone());
                send(up, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                send(up, *x, g.clone());
                if self.wants(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    send(up, *bias, g.sum_rows()?.reshape(shape)?);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(up, *a, g.mul(self.value(*b))?);
                }
                if self.wants(*b) {
                    send(up, *b, g.mul(self.value(*a))?);
                }
            }
            Op::Scale(x, factor) => send(up, *x, g.scale(*factor)),
            Op::Activation(x, kind) => {
                let input = self.value(*x);
                let dx =
                    match kind {
                        Activation::Relu => input.zip_map(g, "relu_grad", |v, gv| {
                            if v > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        })?,
                        Activation::Mish => {
                            input.zip_map(g, "mish_grad", |v, gv| gv * mish_grad(v))?
                        }
                    };
                send(up, *x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = g.clone();
                for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                    let yr = y.row(r);
                    let dot: T = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (v, &yv) in row.iter_mut().zip(yr) {
                        *v = yv * (*v - dot);
                    }
                }
                send(up, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gamma = self.value(*gain);
                let d = normalized.cols();
                let width = T::lit(d as f64);
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(normalized.shape());
                    for (r, out) in dx.data_mut().chunks_mut(d).enumerate() {
                        let gr = g.row(r);
                        let xr = normalized.row(r);
                        let dxhat: Vec<T> =
                            gr.iter().zip(gamma.data()).map(|(&a, &b)| a * b).collect();
                        let sum: T = dxhat.iter().copied().sum();
                        let dot: T = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / width;
                        for j in 0..d {
                            out[j] = scale * (width * dxhat[j] - sum - xr[j] * dot);
                        }
                    }
                    send(up, *x, dx);
                }
                if self.wants(*gain) {
                    let dg = g
                        .mul(normalized)?
                        .sum_rows()?
                        .reshape(gamma.shape().to_vec())?;
                    send(up, *gain, dg);
                }
                if self.wants(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    send(up, *bias, g.sum_rows()?.reshape(shape)?);
                }
            }
            Op::Dropout { x, multipliers } => send(up, *x, g.mul(multipliers)?),
            Op::MaskRows { x, mask } => send(up, *x, g.mask_rows(mask)?),
            Op::SliceCols { x, start } => {
                let input = self.value(*x);
                let (n, width) = (input.cols(), g.cols());
                let mut dx = Tensor::zeros(input.shape());
                for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                    row[*start..start + width].copy_from_slice(g.row(r));
                }
                send(up, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.wants(p) {
                        send(up, p, g.slice_cols(offset, width)?);
                    }
                    offset += width;
                }
            }
            Op::MeanRows { x, mask, count } => {
                let input = self.value(*x);
                let share = T::one() / T::lit(*count as f64);
                let grow = g.row(0);
                let mut dx = Tensor::zeros(input.shape());
                let n = input.cols();
                for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                    if mask.as_ref().is_none_or(|m| m[r]) {
                        for (v, &gv) in row.iter_mut().zip(grow) {
                            *v = gv * share;
                        }
                    }
                }
                send(up, *x, dx);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                send(up, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let floor = T::lit(PROB_FLOOR);
                let coef = g.data()[0] / T::lit(labels.len() as f64);
                let mut dp = Tensor::zeros(p.shape());
                let c = p.cols();
                for (i, &l) in labels.iter().enumerate() {
                    let pv = p.get(i, l);
                    if pv > floor {
                        dp.data_mut()[i * c + l] = -coef / pv;
                    }
                }
                send(up, *probs, dp);
            }
        }
        Ok(())
    }
}
