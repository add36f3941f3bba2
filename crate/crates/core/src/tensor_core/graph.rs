//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; node ids are
//! therefore topologically ordered and `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor_core::ops::{self, ConvDims, NormSaved, Padding};
use crate::tensor_core::Tensor;

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    Reshape(NodeId),
    MeanOverTime(NodeId),
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
    },
    RoutedConv {
        input: NodeId,
        experts: Vec<(NodeId, NodeId)>,
        assign: Vec<usize>,
    },
    InstanceNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: NormSaved,
    },
    SliceChannels {
        input: NodeId,
        start: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Matmul(NodeId, NodeId),
    Stack(Vec<NodeId>),
    ScaleRows {
        input: NodeId,
        scale: NodeId,
    },
    Gather {
        input: NodeId,
        index: Vec<usize>,
    },
    DynamicPointwise {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    GroupAffine {
        input: NodeId,
        coeffs: NodeId,
        group: usize,
    },
    Mse {
        pred: NodeId,
        target: Tensor,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::Reshape(_) => "reshape",
            Op::MeanOverTime(_) => "mean_over_time",
            Op::Conv1d { .. } => "conv1d",
            Op::RoutedConv { .. } => "routed_conv",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Linear { .. } => "linear",
            Op::Matmul(..) => "matmul",
            Op::Stack(_) => "stack",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Gather { .. } => "gather",
            Op::DynamicPointwise { .. } => "dynamic_pointwise",
            Op::GroupAffine { .. } => "group_affine",
            Op::Mse { .. } => "mse",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, NodeId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the loss does not depend on the node.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        self.grads[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, &grad).expect("gradient shapes agree"),
        None => *slot = Some(grad),
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id].op.tag()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Records a constant or input tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Records a parameter. Repeated calls with the same tensor (by address)
    /// return the same node so its gradient accumulates in one place.
    pub fn param(&mut self, value: &Tensor) -> NodeId {
        let key = value as *const Tensor as usize;
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.leaf(value.clone());
        self.params.insert(key, id);
        id
    }

    /// Makes later [`Graph::param`] calls on `value` resolve to `node`.
    /// Used to differentiate with respect to one parameter tensor by
    /// supplying it as an ordinary input.
    pub fn bind_param(&mut self, value: &Tensor, node: NodeId) {
        self.params.insert(value as *const Tensor as usize, node);
    }

    /// Node previously recorded for `value` through [`Graph::param`].
    pub fn param_node(&self, value: &Tensor) -> Option<NodeId> {
        self.params.get(&(value as *const Tensor as usize)).copied()
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul")?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = ops::gelu(self.value(a));
        self.push(Op::Gelu(a), v)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax(self.value(a))?;
        Ok(self.push(Op::Softmax(a), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn mean_over_time(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::mean_over_time(self.value(a))?;
        Ok(self.push(Op::MeanOverTime(a), v))
    }

    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
    ) -> Result<NodeId> {
        let v = ops::conv1d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        Ok(self.push(
            Op::Conv1d {
                input,
                weight,
                bias,
                padding,
            },
            v,
        ))
    }

    /// Per-sample convolution where sample `n` uses expert `assign[n]`.
    /// Experts may differ in kernel size; all use same padding and share
    /// input/output channel counts.
    pub fn routed_conv(
        &mut self,
        input: NodeId,
        experts: &[(NodeId, NodeId)],
        assign: &[usize],
    ) -> Result<NodeId> {
        let x = self.value(input);
        x.expect_rank(3, "routed_conv", "input [N, Cin, T]")?;
        if assign.len() != x.dim(0) {
            return Err(Error::shape(
                "routed_conv",
                format!("{} assignments for batch axis of size {}", assign.len(), x.dim(0)),
            ));
        }
        let mut dims = Vec::with_capacity(experts.len());
        for &(w, b) in experts {
            let d = ops::conv_dims(x, self.value(w), Padding::Same)?;
            if self.value(b).numel() != d.cout {
                return Err(Error::shape("routed_conv", "expert bias does not match output channels"));
            }
            dims.push(d);
        }
        let cout = dims
            .first()
            .map(|d| d.cout)
            .ok_or_else(|| Error::invalid("routed_conv", "no experts"))?;
        if dims.iter().any(|d| d.cout != cout) {
            return Err(Error::shape("routed_conv", "experts disagree on output channels"));
        }
        if let Some(&bad) = assign.iter().find(|&&e| e >= experts.len()) {
            return Err(Error::invalid("routed_conv", format!("expert index {bad} out of range")));
        }
        let (n, t) = (x.dim(0), x.dim(2));
        let mut out = Tensor::zeros(&[n, cout, t]);
        for (i, &e) in assign.iter().enumerate() {
            let (w, b) = experts[e];
            ops::conv_sample(
                x.row(i),
                self.value(w).data(),
                Some(self.value(b).data()),
                &dims[e],
                out.row_mut(i),
            );
        }
        Ok(self.push(
            Op::RoutedConv {
                input,
                experts: experts.to_vec(),
                assign: assign.to_vec(),
            },
            out,
        ))
    }

    pub fn instance_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (v, saved) =
            ops::instance_norm_saved(self.value(input), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                saved,
            },
            v,
        ))
    }

    /// Channels `start..start + len` of a [N, C, T] tensor.
    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(input);
        x.expect_rank(3, "slice_channels", "input [N, C, T]")?;
        let (n, c, t) = (x.dim(0), x.dim(1), x.dim(2));
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} exceeds channel axis (axis 1) of size {c}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(n * len * t);
        for i in 0..n {
            let row = x.row(i);
            data.extend_from_slice(&row[start * t..(start + len) * t]);
        }
        let v = Tensor::from_vec(vec![n, len, t], data)?;
        Ok(self.push(Op::SliceChannels { input, start }, v))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let v = ops::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            v,
        ))
    }

    /// [N, K] x [K, M] -> [N, M].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_rank(2, "matmul", "lhs [N, K]")?;
        y.expect_rank(2, "matmul", "rhs [K, M]")?;
        let (n, k, m) = (x.dim(0), x.dim(1), y.dim(1));
        if y.dim(0) != k {
            return Err(Error::shape(
                "matmul",
                format!("lhs axis 1 is {k} but rhs axis 0 is {}", y.dim(0)),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..k {
                let a = x.data()[i * k + j];
                for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(y.row(j)) {
                    *o += a * b;
                }
            }
        }
        let v = Tensor::from_vec(vec![n, m], out)?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    /// Flattens each input and stacks them as rows: K inputs of `m` values -> [K, m].
    pub fn stack(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let m = inputs
            .first()
            .map(|&i| self.value(i).numel())
            .ok_or_else(|| Error::invalid("stack", "no inputs"))?;
        let mut data = Vec::with_capacity(m * inputs.len());
        for &i in inputs {
            let v = self.value(i);
            if v.numel() != m {
                return Err(Error::shape("stack", "inputs differ in element count"));
            }
            data.extend_from_slice(v.data());
        }
        let v = Tensor::from_vec(vec![inputs.len(), m], data)?;
        Ok(self.push(Op::Stack(inputs.to_vec()), v))
    }

    /// Multiplies row `n` of `input` by `scale[n]`.
    pub fn scale_rows(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let (x, s) = (self.value(input), self.value(scale));
        if s.numel() != x.dim(0) {
            return Err(Error::shape(
                "scale_rows",
                format!("{} scales for batch axis of size {}", s.numel(), x.dim(0)),
            ));
        }
        let mut v = x.clone();
        for i in 0..x.dim(0) {
            let f = s.data()[i];
            v.row_mut(i).iter_mut().for_each(|e| *e *= f);
        }
        Ok(self.push(Op::ScaleRows { input, scale }, v))
    }

    /// Picks `input[n, index[n]]` from a [N, E] tensor.
    pub fn gather(&mut self, input: NodeId, index: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        x.expect_rank(2, "gather", "input [N, E]")?;
        if index.len() != x.dim(0) || index.iter().any(|&i| i >= x.dim(1)) {
            return Err(Error::shape("gather", "index does not fit input"));
        }
        let data = index.iter().enumerate().map(|(n, &e)| x.row(n)[e]).collect();
        let v = Tensor::from_vec(vec![index.len()], data)?;
        Ok(self.push(
            Op::Gather {
                input,
                index: index.to_vec(),
            },
            v,
        ))
    }

    /// Pointwise convolution with a different weight per sample:
    /// `out[n, 0, t] = sum_l weight[n, l] * input[n, l, t] + bias[n]`.
    pub fn dynamic_pointwise(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        x.expect_rank(3, "dynamic_pointwise", "input [N, L, T]")?;
        let (n, l, t) = (x.dim(0), x.dim(1), x.dim(2));
        if w.numel() != n * l || b.numel() != n {
            return Err(Error::shape(
                "dynamic_pointwise",
                format!(
                    "weights {:?} / bias {:?} do not match input [N={n}, L={l}, T]",
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        let mut out = vec![0.0; n * t];
        for i in 0..n {
            let o = &mut out[i * t..(i + 1) * t];
            o.iter_mut().for_each(|v| *v = b.data()[i]);
            let xr = x.row(i);
            for ch in 0..l {
                let wv = w.data()[i * l + ch];
                for (ov, &xv) in o.iter_mut().zip(&xr[ch * t..(ch + 1) * t]) {
                    *ov += wv * xv;
                }
            }
        }
        let v = Tensor::from_vec(vec![n, 1, t], out)?;
        Ok(self.push(Op::DynamicPointwise { input, weight, bias }, v))
    }

    /// Channel-wise affine map with coefficients shared by groups of rows:
    /// rows `g*group..(g+1)*group` of a [N, L, T] input use
    /// `coeffs[g, 0..L]` as scale and `coeffs[g, L..2L]` as shift.
    pub fn group_affine(&mut self, input: NodeId, coeffs: NodeId, group: usize) -> Result<NodeId> {
        let (x, c) = (self.value(input), self.value(coeffs));
        x.expect_rank(3, "group_affine", "input [N, L, T]")?;
        c.expect_rank(2, "group_affine", "coefficients [G, 2L]")?;
        let (n, l, t) = (x.dim(0), x.dim(1), x.dim(2));
        if group == 0 || n % group != 0 || c.dim(0) != n / group || c.dim(1) != 2 * l {
            return Err(Error::shape(
                "group_affine",
                format!(
                    "coefficients {:?} do not cover input {:?} in groups of {group}",
                    c.shape(),
                    x.shape()
                ),
            ));
        }
        let mut v = x.clone();
        for i in 0..n {
            let cr = c.row(i / group);
            let row = v.row_mut(i);
            for ch in 0..l {
                let (g, b) = (cr[ch], cr[l + ch]);
                row[ch * t..(ch + 1) * t].iter_mut().for_each(|e| *e = g * *e + b);
            }
        }
        Ok(self.push(
            Op::GroupAffine {
                input,
                coeffs,
                group,
            },
            v,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        self.value(pred).expect_same_shape(target, "mse")?;
        let p = self.value(pred);
        let v = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.numel() as f64;
        Ok(self.push(
            Op::Mse {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(v),
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::ones(self.value(loss).shape()));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*b], g.scale(-1.0));
                    accumulate(&mut grads[*a], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads[*a], g.scale(*f)),
                Op::Sum(a) => {
                    let shape = self.value(*a).shape();
                    accumulate(&mut grads[*a], Tensor::full(shape, g.data()[0]));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    accumulate(
                        &mut grads[*a],
                        Tensor::full(x.shape(), g.data()[0] / x.numel() as f64),
                    );
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = x.map(ops::gelu_derivative).mul(&g)?;
                    accumulate(&mut grads[*a], ga);
                }
                Op::Softmax(a) => {
                    accumulate(&mut grads[*a], ops::softmax_backward(&node.value, &g));
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads[*a], g.reshape(self.value(*a).shape())?);
                }
                Op::MeanOverTime(a) => {
                    let x = self.value(*a);
                    let t = x.dim(2);
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat(v / t as f64).take(t))
                        .collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(x.shape().to_vec(), data)?);
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    padding,
                } => {
                    let (gx, gw, gb) =
                        ops::conv1d_backward(self.value(*input), self.value(*weight), &g, *padding)?;
                    accumulate(&mut grads[*input], gx);
                    accumulate(&mut grads[*weight], gw);
                    if let Some(b) = bias {
                        accumulate(&mut grads[*b], gb.reshape(self.value(*b).shape())?);
                    }
                }
                Op::RoutedConv {
                    input,
                    experts,
                    assign,
                } => {
                    let x = self.value(*input);
                    let mut gx = Tensor::zeros(x.shape());
                    let mut gws: Vec<Option<(Tensor, Tensor)>> = vec![None; experts.len()];
                    for (i, &e) in assign.iter().enumerate() {
                        let (w, b) = experts[e];
                        let wv = self.value(w);
                        let d: ConvDims = ops::conv_dims(x, wv, Padding::Same)?;
                        let slot = gws[e].get_or_insert_with(|| {
                            (Tensor::zeros(wv.shape()), Tensor::zeros(self.value(b).shape()))
                        });
                        ops::conv_sample_backward(
                            x.row(i),
                            wv.data(),
                            g.row(i),
                            &d,
                            gx.row_mut(i),
                            slot.0.data_mut(),
                            Some(slot.1.data_mut()),
                        );
                    }
                    accumulate(&mut grads[*input], gx);
                    for (e, slot) in gws.into_iter().enumerate() {
                        if let Some((gw, gb)) = slot {
                            accumulate(&mut grads[experts[e].0], gw);
                            accumulate(&mut grads[experts[e].1], gb);
                        }
                    }
                }
                Op::InstanceNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (gx, gg, gb) = ops::instance_norm_backward(saved, self.value(*gamma), &g);
                    accumulate(&mut grads[*input], gx);
                    accumulate(&mut grads[*gamma], gg.reshape(self.value(*gamma).shape())?);
                    accumulate(&mut grads[*beta], gb.reshape(self.value(*beta).shape())?);
                }
                Op::SliceChannels { input, start } => {
                    let x = self.value(*input);
                    let (c, t) = (x.dim(1), x.dim(2));
                    let len = node.value.dim(1);
                    let mut gx = Tensor::zeros(x.shape());
                    for i in 0..x.dim(0) {
                        gx.row_mut(i)[start * t..(start + len) * t].copy_from_slice(g.row(i));
                    }
                    debug_assert!(start + len <= c);
                    accumulate(&mut grads[*input], gx);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (self.value(*input), self.value(*weight));
                    let (n, d, o) = (x.dim(0), x.dim(1), w.dim(0));
                    let mut gx = Tensor::zeros(x.shape());
                    let mut gw = Tensor::zeros(w.shape());
                    for i in 0..n {
                        for j in 0..o {
                            let gv = g.data()[i * o + j];
                            for k in 0..d {
                                gx.data_mut()[i * d + k] += gv * w.data()[j * d + k];
                                gw.data_mut()[j * d + k] += gv * x.data()[i * d + k];
                            }
                        }
                    }
                    accumulate(&mut grads[*input], gx);
                    accumulate(&mut grads[*weight], gw);
                    if let Some(b) = bias {
                        let mut gb = vec![0.0; o];
                        for row in g.data().chunks(o) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads[*b], Tensor::from_vec(shape, gb)?);
                    }
                }
                Op::Matmul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (x.dim(0), x.dim(1), y.dim(1));
                    let mut ga = Tensor::zeros(x.shape());
                    let mut gb = Tensor::zeros(y.shape());
                    for i in 0..n {
                        for j in 0..k {
                            let mut acc = 0.0;
                            let xv = x.data()[i * k + j];
                            for l in 0..m {
                                let gv = g.data()[i * m + l];
                                acc += gv * y.data()[j * m + l];
                                gb.data_mut()[j * m + l] += xv * gv;
                            }
                            ga.data_mut()[i * k + j] = acc;
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Stack(inputs) => {
                    for (row, &i) in inputs.iter().enumerate() {
                        let shape = self.value(i).shape().to_vec();
                        accumulate(&mut grads[i], Tensor::from_vec(shape, g.row(row).to_vec())?);
                    }
                }
                Op::ScaleRows { input, scale } => {
                    let (x, s) = (self.value(*input), self.value(*scale));
                    let mut gx = g.clone();
                    let mut gs = vec![0.0; s.numel()];
                    for i in 0..x.dim(0) {
                        let f = s.data()[i];
                        gs[i] = g.row(i).iter().zip(x.row(i)).map(|(a, b)| a * b).sum();
                        gx.row_mut(i).iter_mut().for_each(|e| *e *= f);
                    }
                    accumulate(&mut grads[*input], gx);
                    accumulate(&mut grads[*scale], Tensor::from_vec(s.shape().to_vec(), gs)?);
                }
                Op::Gather { input, index } => {
                    let x = self.value(*input);
                    let mut gx = Tensor::zeros(x.shape());
                    for (n, &e) in index.iter().enumerate() {
                        gx.row_mut(n)[e] += g.data()[n];
                    }
                    accumulate(&mut grads[*input], gx);
                }
                Op::DynamicPointwise { input, weight, bias } => {
                    let (x, w) = (self.value(*input), self.value(*weight));
                    let (n, l, t) = (x.dim(0), x.dim(1), x.dim(2));
                    let mut gx = Tensor::zeros(x.shape());
                    let mut gw = vec![0.0; n * l];
                    let mut gb = vec![0.0; n];
                    for i in 0..n {
                        let go = g.row(i);
                        gb[i] = go.iter().sum();
                        let xr = x.row(i);
                        let gxr = gx.row_mut(i);
                        for ch in 0..l {
                            let wv = w.data()[i * l + ch];
                            let mut acc = 0.0;
                            for ((gxv, &xv), &gv) in gxr[ch * t..(ch + 1) * t]
                                .iter_mut()
                                .zip(&xr[ch * t..(ch + 1) * t])
                                .zip(go)
                            {
                                acc += gv * xv;
                                *gxv += wv * gv;
                            }
                            gw[i * l + ch] = acc;
                        }
                    }
                    accumulate(&mut grads[*input], gx);
                    accumulate(&mut grads[*weight], Tensor::from_vec(w.shape().to_vec(), gw)?);
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads[*bias], Tensor::from_vec(bshape, gb)?);
                }
                Op::GroupAffine {
                    input,
                    coeffs,
                    group,
                } => {
                    let (x, c) = (self.value(*input), self.value(*coeffs));
                    let (n, l, t) = (x.dim(0), x.dim(1), x.dim(2));
                    let mut gx = g.clone();
                    let mut gc = Tensor::zeros(c.shape());
                    for i in 0..n {
                        let gi = i / group;
                        let cr = c.row(gi).to_vec();
                        let xr = x.row(i);
                        let gr = g.row(i);
                        for ch in 0..l {
                            let range = ch * t..(ch + 1) * t;
                            let mut ds = 0.0;
                            let mut db = 0.0;
                            for (&gv, &xv) in gr[range.clone()].iter().zip(&xr[range.clone()]) {
                                ds += gv * xv;
                                db += gv;
                            }
                            let crow = gc.row_mut(gi);
                            crow[ch] += ds;
                            crow[l + ch] += db;
                            gx.row_mut(i)[range].iter_mut().for_each(|e| *e *= cr[ch]);
                        }
                    }
                    accumulate(&mut grads[*input], gx);
                    accumulate(&mut grads[*coeffs], gc);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let f = 2.0 * g.data()[0] / p.numel() as f64;
                    let gp = p.zip_map(target, |a, b| f * (a - b))?;
                    accumulate(&mut grads[*pred], gp);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[0.5, -1.0, 3.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_with_fan_out() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn params_deduplicate_by_address() {
        let w = Tensor::vector(&[1.0, 2.0]);
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(g.param_node(&w).unwrap()).data(), &[2.0, 2.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0]));
        let y = g.leaf(Tensor::vector(&[4.0, 5.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(y).data(), &[0.0, 0.0]);
    }
}
