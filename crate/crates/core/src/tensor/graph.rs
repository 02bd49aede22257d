use std::collections::HashMap;

use super::kernels::{self, ConvDims, MatMulDims, PoolDims};
use super::{shape_err, GradientMap, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive inventory. Input conventions:
///
/// * `Add`, `Mul`, `EmbeddingAdd`: `[a, b]`, `b` equal to `a` or a trailing
///   suffix of it (bias / positional broadcast).
/// * `MatMul`: `[a, b]` with `a = [.., m, k]` and `b = [k, n]` or `[.., k, n]`.
/// * `Conv2d`, `DepthwiseConv2d`, `PointwiseConv2d`: `[x, w]` or `[x, w, bias]`.
/// * `LayerNorm`: `[x, gamma, beta]`, normalizing the last axis.
/// * `BatchNormInference`: `[x, gamma, beta, running_mean, running_var]`.
/// * `SoftmaxCrossEntropy`: `[logits]` with the labels as attributes.
/// * `Concat`: any number of inputs; everything else: `[x]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Mul,
    Scale(f64),
    MatMul,
    Conv2d { stride: usize, pad: usize },
    DepthwiseConv2d { stride: usize, pad: usize },
    PointwiseConv2d,
    Relu,
    Gelu,
    Softmax,
    LayerNorm { eps: f64 },
    BatchNormInference { eps: f64 },
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Reshape(Vec<usize>),
    Transpose(Vec<usize>),
    Concat { axis: usize },
    EmbeddingAdd,
    DropoutIdentity,
    Roll { axis: usize, shift: isize },
    Sum,
    SoftmaxCrossEntropy { labels: Vec<usize>, class_weights: Option<Vec<f64>> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Primitive::PointwiseConv2d => "pointwise_conv2d",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::BatchNormInference { .. } => "batch_norm_inference_style",
            Primitive::MaxPool2d { .. } => "max_pool2d",
            Primitive::AvgPool2d { .. } => "avg_pool2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Flatten => "flatten",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose(_) => "transpose",
            Primitive::Concat { .. } => "concat",
            Primitive::EmbeddingAdd => "embedding_add",
            Primitive::DropoutIdentity => "dropout_identity",
            Primitive::Roll { .. } => "roll",
            Primitive::Sum => "sum",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

/// How [`Graph::backward_with`] propagates through nonlinearities.
pub enum BackwardRule<'a, S> {
    /// Exact reverse-mode gradients.
    Standard,
    /// Guided backpropagation: relu passes only positive upstream gradient
    /// at positive inputs.
    GuidedRelu,
    /// DeepLIFT Rescale multipliers against a structurally identical graph
    /// evaluated on the reference input. Multi-input nonlinearities
    /// (softmax, layer norm) have no rescale rule; with
    /// `linearize_unsupported` they fall back to their gradient, otherwise
    /// they are an error.
    DeepLift {
        reference: &'a Graph<S>,
        linearize_unsupported: bool,
    },
}

/// Below this |Δx| the rescale multiplier is replaced by the local gradient.
const RESCALE_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    Scale { x: Var, c: f64 },
    MatMul { a: Var, b: Var, dims: MatMulDims },
    Conv { x: Var, w: Var, bias: Option<Var>, dims: ConvDims, depthwise: bool },
    Relu { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, n: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, n: usize, stats: Vec<(f64, f64)> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Var, var: Var, eps: f64, channels: usize, plane: usize },
    MaxPool { x: Var, dims: PoolDims, argmax: Vec<usize> },
    AvgPool { x: Var, dims: PoolDims },
    GlobalAvgPool { x: Var, size: usize },
    View { x: Var },
    Transpose { x: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, outer: usize, inner_sizes: Vec<usize> },
    Roll { x: Var, axis: usize, shift: isize },
    Sum { x: Var },
    SoftmaxXent { x: Var, probs: Vec<f64>, labels: Vec<usize>, weights: Vec<f64>, norm: f64 },
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op,
    kind: &'static str,
    value: Tensor<S>,
    requires_grad: bool,
    name: Option<String>,
}

/// Append-only differentiation tape confined to one thread.
#[derive(Debug, Clone)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    names: HashMap<String, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, op: Op, kind: &'static str, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            kind,
            value,
            requires_grad,
            name: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, "leaf", value, requires_grad)
    }

    /// Adds a named leaf; its gradient is reported under `name`. A repeated
    /// name returns the existing leaf.
    pub fn named_leaf(&mut self, name: &str, value: Tensor<S>, requires_grad: bool) -> Var {
        if let Some(&v) = self.names.get(name) {
            return v;
        }
        let v = self.leaf(value, requires_grad);
        self.nodes[v.0].name = Some(name.to_string());
        self.names.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].kind
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of any node reached by a previous backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ------------------------------------------------------------ forward

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        let kind = prim.name();
        let arity = |expected: usize| -> Result<(), TensorError> {
            if inputs.len() == expected {
                Ok(())
            } else {
                Err(TensorError::Arity {
                    op: kind,
                    expected,
                    got: inputs.len(),
                })
            }
        };
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (op, value) = match prim {
            Primitive::Add | Primitive::EmbeddingAdd | Primitive::Mul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                let bcast = self.check_suffix(kind, a, b)?;
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let is_mul = matches!(prim, Primitive::Mul);
                let data: Vec<S> = av
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let y = bv[i % bv.len()];
                        if is_mul {
                            x * y
                        } else {
                            x + y
                        }
                    })
                    .collect();
                let value = Tensor::new(self.shape(a).to_vec(), data)?;
                let op = if is_mul {
                    Op::Mul { a, b, bcast }
                } else {
                    Op::Add { a, b, bcast }
                };
                (op, value)
            }
            Primitive::Scale(c) => {
                arity(1)?;
                if !c.is_finite() {
                    return Err(unsupported(kind, format!("non-finite factor {c}")));
                }
                let x = inputs[0];
                let data = self.value(x).data().iter().map(|&v| S::narrow(v.widen() * c)).collect();
                (Op::Scale { x, c }, Tensor::new(self.shape(x).to_vec(), data)?)
            }
            Primitive::MatMul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                let (dims, out_shape) = self.matmul_dims(a, b)?;
                let data = kernels::matmul_fwd(self.value(a).data(), self.value(b).data(), dims);
                (Op::MatMul { a, b, dims }, Tensor::new(out_shape, data)?)
            }
            Primitive::Conv2d { stride, pad } | Primitive::DepthwiseConv2d { stride, pad } => {
                let depthwise = matches!(prim, Primitive::DepthwiseConv2d { .. });
                self.conv(kind, inputs, stride, pad, depthwise)?
            }
            Primitive::PointwiseConv2d => {
                let w = *inputs.get(1).ok_or(TensorError::Arity {
                    op: kind,
                    expected: 2,
                    got: inputs.len(),
                })?;
                let ws = self.shape(w);
                if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
                    return Err(shape_err(kind, format!("kernel must be [co, ci, 1, 1], got {ws:?}")));
                }
                self.conv(kind, inputs, 1, 0, false)?
            }
            Primitive::Relu | Primitive::Gelu => {
                arity(1)?;
                let x = inputs[0];
                let is_relu = matches!(prim, Primitive::Relu);
                let data = self
                    .value(x)
                    .data()
                    .iter()
                    .map(|&v| {
                        if is_relu {
                            if v > S::zero() {
                                v
                            } else {
                                S::zero()
                            }
                        } else {
                            S::narrow(kernels::gelu(v.widen()).0)
                        }
                    })
                    .collect();
                let op = if is_relu { Op::Relu { x } } else { Op::Gelu { x } };
                (op, Tensor::new(self.shape(x).to_vec(), data)?)
            }
            Primitive::Softmax => {
                arity(1)?;
                let x = inputs[0];
                let n = *self.shape(x).last().expect("rank >= 1");
                let data = kernels::softmax_fwd(self.value(x).data(), n);
                (Op::Softmax { x, n }, Tensor::new(self.shape(x).to_vec(), data)?)
            }
            Primitive::LayerNorm { eps } => {
                arity(3)?;
                if !(eps > 0.0) {
                    return Err(unsupported(kind, format!("eps must be positive, got {eps}")));
                }
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let n = *self.shape(x).last().expect("rank >= 1");
                for p in [gamma, beta] {
                    if self.shape(p) != [n] {
                        return Err(shape_err(kind, format!("affine {:?} vs last dim {n}", self.shape(p))));
                    }
                }
                let (data, stats) = kernels::layer_norm_fwd(
                    self.value(x).data(),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    n,
                    eps,
                );
                (
                    Op::LayerNorm { x, gamma, beta, n, stats },
                    Tensor::new(self.shape(x).to_vec(), data)?,
                )
            }
            Primitive::BatchNormInference { eps } => {
                arity(5)?;
                if !(eps > 0.0) {
                    return Err(unsupported(kind, format!("eps must be positive, got {eps}")));
                }
                let x = inputs[0];
                let xs = self.shape(x).to_vec();
                if xs.len() < 2 {
                    return Err(shape_err(kind, format!("need [batch, channels, ..], got {xs:?}")));
                }
                let channels = xs[1];
                let plane: usize = xs[2..].iter().product();
                for &p in &inputs[1..] {
                    if self.shape(p) != [channels] {
                        return Err(shape_err(kind, format!("per-channel {:?} vs {channels}", self.shape(p))));
                    }
                }
                let (scale, shift) = self.bn_affine(inputs, eps);
                let xv = self.value(x).data();
                let data = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let c = (i / plane) % channels;
                        S::narrow(v.widen() * scale[c] + shift[c])
                    })
                    .collect();
                (
                    Op::BatchNorm {
                        x,
                        gamma: inputs[1],
                        beta: inputs[2],
                        mean: inputs[3],
                        var: inputs[4],
                        eps,
                        channels,
                        plane,
                    },
                    Tensor::new(xs, data)?,
                )
            }
            Primitive::MaxPool2d { kernel, stride } | Primitive::AvgPool2d { kernel, stride } => {
                arity(1)?;
                let x = inputs[0];
                let dims = self.pool_dims(kind, x, kernel, stride)?;
                let mut shape = self.shape(x).to_vec();
                let r = shape.len();
                shape[r - 2] = dims.h_out;
                shape[r - 1] = dims.w_out;
                if matches!(prim, Primitive::MaxPool2d { .. }) {
                    let (data, argmax) = kernels::max_pool_fwd(self.value(x).data(), &dims);
                    (Op::MaxPool { x, dims, argmax }, Tensor::new(shape, data)?)
                } else {
                    let data = kernels::avg_pool_fwd(self.value(x).data(), &dims);
                    (Op::AvgPool { x, dims }, Tensor::new(shape, data)?)
                }
            }
            Primitive::GlobalAvgPool => {
                arity(1)?;
                let x = inputs[0];
                let xs = self.shape(x).to_vec();
                if xs.len() < 3 {
                    return Err(shape_err(kind, format!("need [batch, channels, spatial..], got {xs:?}")));
                }
                let size: usize = xs[2..].iter().product();
                let data = self
                    .value(x)
                    .data()
                    .chunks(size)
                    .map(|c| S::narrow(c.iter().map(|v| v.widen()).sum::<f64>() / size as f64))
                    .collect();
                (Op::GlobalAvgPool { x, size }, Tensor::new(vec![xs[0], xs[1]], data)?)
            }
            Primitive::Flatten | Primitive::Reshape(_) | Primitive::DropoutIdentity => {
                arity(1)?;
                let x = inputs[0];
                let xs = self.shape(x).to_vec();
                let shape = match &prim {
                    Primitive::Flatten => vec![xs[0], xs[1..].iter().product::<usize>().max(1)],
                    Primitive::Reshape(s) => s.clone(),
                    _ => xs.clone(),
                };
                let value = self.value(x).clone().reshaped(&shape).map_err(|_| {
                    shape_err(kind, format!("{xs:?} -> {shape:?}"))
                })?;
                if value.shape().iter().any(|&d| d == 0) {
                    return Err(shape_err(kind, format!("zero-sized target {shape:?}")));
                }
                (Op::View { x }, value)
            }
            Primitive::Transpose(perm) => {
                arity(1)?;
                let x = inputs[0];
                let xs = self.shape(x).to_vec();
                let mut seen = vec![false; xs.len()];
                if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
                    return Err(unsupported(kind, format!("{perm:?} is not a permutation of rank {}", xs.len())));
                }
                let data = kernels::transpose(self.value(x).data(), &xs, &perm);
                let shape = perm.iter().map(|&p| xs[p]).collect();
                (Op::Transpose { x, perm }, Tensor::new(shape, data)?)
            }
            Primitive::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(TensorError::Arity { op: kind, expected: 1, got: 0 });
                }
                let first = self.shape(inputs[0]).to_vec();
                if axis >= first.len() {
                    return Err(unsupported(kind, format!("axis {axis} out of range for rank {}", first.len())));
                }
                let mut inner_sizes = Vec::with_capacity(inputs.len());
                let inner_tail: usize = first[axis + 1..].iter().product();
                let mut total_axis = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    if s.len() != first.len()
                        || s[..axis] != first[..axis]
                        || s[axis + 1..] != first[axis + 1..]
                    {
                        return Err(shape_err(kind, format!("{first:?} vs {s:?} along axis {axis}")));
                    }
                    total_axis += s[axis];
                    inner_sizes.push(s[axis] * inner_tail);
                }
                let outer: usize = first[..axis].iter().product();
                let mut data = Vec::with_capacity(outer * inner_sizes.iter().sum::<usize>());
                for o in 0..outer {
                    for (&v, &sz) in inputs.iter().zip(&inner_sizes) {
                        data.extend_from_slice(&self.value(v).data()[o * sz..(o + 1) * sz]);
                    }
                }
                let mut shape = first.clone();
                shape[axis] = total_axis;
                (
                    Op::Concat {
                        inputs: inputs.to_vec(),
                        outer,
                        inner_sizes,
                    },
                    Tensor::new(shape, data)?,
                )
            }
            Primitive::Roll { axis, shift } => {
                arity(1)?;
                let x = inputs[0];
                let xs = self.shape(x).to_vec();
                if axis >= xs.len() {
                    return Err(unsupported(kind, format!("axis {axis} out of range for rank {}", xs.len())));
                }
                let data = kernels::roll(self.value(x).data(), &xs, axis, shift);
                (Op::Roll { x, axis, shift }, Tensor::new(xs, data)?)
            }
            Primitive::Sum => {
                arity(1)?;
                let x = inputs[0];
                let s: f64 = self.value(x).data().iter().map(|v| v.widen()).sum();
                (Op::Sum { x }, Tensor::scalar(S::narrow(s)))
            }
            Primitive::SoftmaxCrossEntropy { labels, class_weights } => {
                arity(1)?;
                let x = inputs[0];
                let xs = self.shape(x).to_vec();
                if xs.len() != 2 || xs[0] != labels.len() {
                    return Err(shape_err(
                        kind,
                        format!("logits {xs:?} vs {} labels", labels.len()),
                    ));
                }
                let classes = xs[1];
                if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                    return Err(unsupported(kind, format!("label {bad} out of range for {classes} classes")));
                }
                let cw = match class_weights {
                    Some(w) if w.len() != classes || w.iter().any(|&v| !(v >= 0.0)) => {
                        return Err(unsupported(kind, format!("class weights {w:?}")));
                    }
                    Some(w) => w,
                    None => vec![1.0; classes],
                };
                let probs: Vec<f64> = kernels::softmax_fwd(&self.value(x).to_f64_vec(), classes);
                let weights: Vec<f64> = labels.iter().map(|&l| cw[l]).collect();
                let norm: f64 = weights.iter().sum();
                if !(norm > 0.0) {
                    return Err(unsupported(kind, "class weights sum to zero over the batch"));
                }
                // -log p via log-sum-exp for accuracy at saturated logits
                let logits = self.value(x).to_f64_vec();
                let mut loss = 0.0;
                for (r, &l) in labels.iter().enumerate() {
                    let row = &logits[r * classes..(r + 1) * classes];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    loss += weights[r] * (lse - row[l]);
                }
                (
                    Op::SoftmaxXent {
                        x,
                        probs,
                        labels,
                        weights,
                        norm,
                    },
                    Tensor::scalar(S::narrow(loss / norm)),
                )
            }
        };
        Ok(self.push(op, kind, value, rg))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<bool, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == *sb {
            return Ok(true);
        }
        Err(shape_err(op, format!("{sa:?} vs {sb:?} (only trailing broadcast allowed)")))
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(MatMulDims, Vec<usize>), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("need rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("inner dims {k} vs {kb} ({sa:?} x {sb:?})")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", format!("batch dims {sa:?} x {sb:?}")));
        }
        let mut out = sa[..sa.len() - 2].to_vec();
        out.extend([m, n]);
        Ok((
            MatMulDims {
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            out,
        ))
    }

    fn conv(
        &self,
        kind: &'static str,
        inputs: &[Var],
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<(Op, Tensor<S>), TensorError> {
        if !(2..=3).contains(&inputs.len()) {
            return Err(TensorError::Arity {
                op: kind,
                expected: 2,
                got: inputs.len(),
            });
        }
        if stride == 0 {
            return Err(unsupported(kind, "stride must be positive"));
        }
        let (x, w) = (inputs[0], inputs[1]);
        let bias = inputs.get(2).copied();
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(kind, format!("need rank-4 input and kernel, got {xs:?}, {ws:?}")));
        }
        let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if depthwise {
            if kc != 1 || c_out != c_in {
                return Err(shape_err(kind, format!("kernel {ws:?} for {c_in} channels (need [c, 1, kh, kw])")));
            }
        } else if kc != c_in {
            return Err(shape_err(kind, format!("input channels {c_in} vs kernel {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err(kind, format!("bias {:?} vs {c_out} outputs", self.shape(b))));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(kind, format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        let bias_data = bias.map(|b| self.value(b).data());
        let data = if depthwise {
            kernels::depthwise_fwd(self.value(x).data(), self.value(w).data(), bias_data, &dims)
        } else {
            kernels::conv2d_fwd(self.value(x).data(), self.value(w).data(), bias_data, &dims)
        };
        let value = Tensor::new(vec![batch, c_out, dims.h_out, dims.w_out], data)?;
        Ok((
            Op::Conv {
                x,
                w,
                bias,
                dims,
                depthwise,
            },
            value,
        ))
    }

    fn pool_dims(&self, kind: &'static str, x: Var, k: usize, stride: usize) -> Result<PoolDims, TensorError> {
        if k == 0 || stride == 0 {
            return Err(unsupported(kind, format!("kernel {k} and stride {stride} must be positive")));
        }
        let xs = self.shape(x);
        if xs.len() < 3 {
            return Err(shape_err(kind, format!("need [.., h, w], got {xs:?}")));
        }
        let r = xs.len();
        let (h, w) = (xs[r - 2], xs[r - 1]);
        if h < k || w < k {
            return Err(shape_err(kind, format!("window {k} larger than {h}x{w}")));
        }
        Ok(PoolDims {
            planes: xs[..r - 2].iter().product(),
            h,
            w,
            k,
            stride,
            h_out: (h - k) / stride + 1,
            w_out: (w - k) / stride + 1,
        })
    }

    fn bn_affine(&self, inputs: &[Var], eps: f64) -> (Vec<f64>, Vec<f64>) {
        let g = self.value(inputs[1]).to_f64_vec();
        let b = self.value(inputs[2]).to_f64_vec();
        let m = self.value(inputs[3]).to_f64_vec();
        let v = self.value(inputs[4]).to_f64_vec();
        let scale: Vec<f64> = g.iter().zip(&v).map(|(g, v)| g / (v + eps).sqrt()).collect();
        let shift = scale.iter().zip(b.iter().zip(&m)).map(|(s, (b, m))| b - s * m).collect();
        (scale, shift)
    }

    // ------------------------------------------------------------ sugar

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale(c), &[x])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Conv2d { stride, pad }, &with_bias(x, w, bias))
    }
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        self.apply(Primitive::DepthwiseConv2d { stride, pad }, &with_bias(x, w, bias))
    }
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        self.apply(Primitive::PointwiseConv2d, &with_bias(x, w, bias))
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Gelu, &[x])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gamma, beta])
    }
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: Var, var: Var, eps: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::BatchNormInference { eps }, &[x, gamma, beta, mean, var])
    }
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::MaxPool2d { kernel, stride }, &[x])
    }
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::AvgPool2d { kernel, stride }, &[x])
    }
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Flatten, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        self.apply(Primitive::Transpose(perm.to_vec()), &[x])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Concat { axis }, xs)
    }
    pub fn embedding_add(&mut self, x: Var, table: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::EmbeddingAdd, &[x, table])
    }
    pub fn dropout(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::DropoutIdentity, &[x])
    }
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var, TensorError> {
        self.apply(Primitive::Roll { axis, shift }, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: Option<&[f64]>) -> Result<Var, TensorError> {
        self.apply(
            Primitive::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                class_weights: class_weights.map(|w| w.to_vec()),
            },
            &[logits],
        )
    }

    // ------------------------------------------------------------ backward

    /// Reverse-mode gradients of a scalar `loss`. Gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap<S>, TensorError> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let seed = Tensor::full(&shape, S::one());
        self.backward_with(loss, &seed, &BackwardRule::Standard)
    }

    /// Backward from an arbitrary node with an explicit upstream seed.
    pub fn backward_with(
        &mut self,
        out: Var,
        seed: &Tensor<S>,
        rule: &BackwardRule<'_, S>,
    ) -> Result<GradientMap<S>, TensorError> {
        if seed.shape() != self.shape(out) {
            return Err(shape_err("backward", format!("seed {:?} vs output {:?}", seed.shape(), self.shape(out))));
        }
        if let BackwardRule::DeepLift { reference, .. } = rule {
            self.check_mirror(reference, out)?;
        }
        let mut temp: Vec<Option<Vec<S>>> = vec![None; out.0 + 1];
        temp[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = temp[i].take() else { continue };
            self.backprop_node(i, &g, &mut temp, rule)?;
            temp[i] = Some(g);
        }
        for (i, t) in temp.into_iter().enumerate() {
            if let Some(t) = t {
                match &mut self.grads[i] {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(&t) {
                            *e = *e + *v;
                        }
                    }
                    slot => *slot = Some(t),
                }
            }
        }
        let mut map = GradientMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true, Some(g)) = (&node.name, node.requires_grad, &self.grads[i]) {
                map.insert(name.clone(), Tensor::new(node.value.shape().to_vec(), g.clone())?);
            }
        }
        Ok(map)
    }

    fn check_mirror(&self, reference: &Graph<S>, out: Var) -> Result<(), TensorError> {
        if reference.nodes.len() <= out.0 {
            return Err(TensorError::ReferenceMismatch(format!(
                "reference has {} nodes, need {}",
                reference.nodes.len(),
                out.0 + 1
            )));
        }
        for (i, (a, b)) in self.nodes.iter().zip(&reference.nodes).take(out.0 + 1).enumerate() {
            if a.kind != b.kind || a.value.shape() != b.value.shape() {
                return Err(TensorError::ReferenceMismatch(format!(
                    "node {i}: {} {:?} vs {} {:?}",
                    a.kind,
                    a.value.shape(),
                    b.kind,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn take_buf(&self, temp: &mut [Option<Vec<S>>], v: Var) -> Option<Vec<S>> {
        if !self.wants(v) {
            return None;
        }
        Some(temp[v.0].take().unwrap_or_else(|| vec![S::zero(); self.nodes[v.0].value.numel()]))
    }

    fn put_buf(temp: &mut [Option<Vec<S>>], v: Var, buf: Option<Vec<S>>) {
        if let Some(buf) = buf {
            match &mut temp[v.0] {
                Some(existing) => {
                    for (e, b) in existing.iter_mut().zip(&buf) {
                        *e = *e + *b;
                    }
                }
                slot => *slot = Some(buf),
            }
        }
    }

    /// Elementwise contribution `dx += g * m(i)`.
    fn elementwise(&self, temp: &mut [Option<Vec<S>>], x: Var, g: &[S], m: impl Fn(usize) -> f64) {
        if let Some(mut dx) = self.take_buf(temp, x) {
            for (i, d) in dx.iter_mut().enumerate() {
                *d = S::narrow(d.widen() + g[i].widen() * m(i));
            }
            Self::put_buf(temp, x, Some(dx));
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[S],
        temp: &mut [Option<Vec<S>>],
        rule: &BackwardRule<'_, S>,
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let reference = match rule {
            BackwardRule::DeepLift { reference, .. } => Some(*reference),
            _ => None,
        };
        let linearize = matches!(
            rule,
            BackwardRule::DeepLift {
                linearize_unsupported: true,
                ..
            }
        );
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, bcast } => {
                self.elementwise(temp, *a, g, |_| 1.0);
                if let Some(mut db) = self.take_buf(temp, *b) {
                    if *bcast {
                        let n = db.len();
                        let mut s = vec![0.0f64; n];
                        for (j, v) in g.iter().enumerate() {
                            s[j % n] += v.widen();
                        }
                        for (d, v) in db.iter_mut().zip(s) {
                            *d = S::narrow(d.widen() + v);
                        }
                    } else {
                        for (d, v) in db.iter_mut().zip(g) {
                            *d = *d + *v;
                        }
                    }
                    Self::put_buf(temp, *b, Some(db));
                }
            }
            Op::Mul { a, b, bcast } => {
                let av = self.operand(*a, reference);
                let bv = self.operand(*b, reference);
                let nb = bv.len();
                self.elementwise(temp, *a, g, |j| bv[j % nb]);
                if let Some(mut db) = self.take_buf(temp, *b) {
                    let mut s = vec![0.0f64; nb];
                    for (j, v) in g.iter().enumerate() {
                        s[if *bcast { j % nb } else { j }] += v.widen() * av[j];
                    }
                    for (d, v) in db.iter_mut().zip(s) {
                        *d = S::narrow(d.widen() + v);
                    }
                    Self::put_buf(temp, *b, Some(db));
                }
            }
            Op::Scale { x, c } => self.elementwise(temp, *x, g, |_| *c),
            Op::MatMul { a, b, dims } => {
                let mut da = self.take_buf(temp, *a);
                let mut db = self.take_buf(temp, *b);
                let (av, bv) = match reference {
                    Some(r) => (self.midpoint(*a, r), self.midpoint(*b, r)),
                    None => (self.value(*a).data().to_vec(), self.value(*b).data().to_vec()),
                };
                kernels::matmul_bwd(&av, &bv, g, *dims, da.as_deref_mut(), db.as_deref_mut());
                Self::put_buf(temp, *a, da);
                Self::put_buf(temp, *b, db);
            }
            Op::Conv { x, w, bias, dims, depthwise } => {
                let mut dx = self.take_buf(temp, *x);
                let mut dw = self.take_buf(temp, *w);
                let mut dbias = bias.and_then(|b| self.take_buf(temp, b));
                let (xv, wv) = match reference {
                    Some(r) => (self.midpoint(*x, r), self.midpoint(*w, r)),
                    None => (self.value(*x).data().to_vec(), self.value(*w).data().to_vec()),
                };
                if *depthwise {
                    kernels::depthwise_bwd(&xv, &wv, g, dims, dx.as_deref_mut(), dw.as_deref_mut(), dbias.as_deref_mut());
                } else {
                    kernels::conv2d_bwd(&xv, &wv, g, dims, dx.as_deref_mut(), dw.as_deref_mut(), dbias.as_deref_mut());
                }
                Self::put_buf(temp, *x, dx);
                Self::put_buf(temp, *w, dw);
                if let Some(b) = bias {
                    Self::put_buf(temp, *b, dbias);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                match rule {
                    BackwardRule::Standard => {
                        self.elementwise(temp, *x, g, |j| if xv[j] > S::zero() { 1.0 } else { 0.0 })
                    }
                    BackwardRule::GuidedRelu => self.elementwise(temp, *x, g, |j| {
                        if xv[j] > S::zero() && g[j] > S::zero() {
                            1.0
                        } else {
                            0.0
                        }
                    }),
                    BackwardRule::DeepLift { reference, .. } => {
                        let m = rescale(xv, node.value.data(), reference, *x, Var(i), |v| {
                            if v > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        });
                        self.elementwise(temp, *x, g, |j| m[j]);
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                match rule {
                    BackwardRule::DeepLift { reference, .. } => {
                        let m = rescale(xv, node.value.data(), reference, *x, Var(i), |v| kernels::gelu(v).1);
                        self.elementwise(temp, *x, g, |j| m[j]);
                    }
                    _ => self.elementwise(temp, *x, g, |j| kernels::gelu(xv[j].widen()).1),
                }
            }
            Op::Softmax { x, n } => {
                if reference.is_some() && !linearize {
                    return Err(TensorError::UnsupportedPrimitive("softmax"));
                }
                if let Some(mut dx) = self.take_buf(temp, *x) {
                    kernels::softmax_bwd(node.value.data(), g, *n, &mut dx);
                    Self::put_buf(temp, *x, Some(dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, n, stats } => {
                if reference.is_some() && !linearize {
                    return Err(TensorError::UnsupportedPrimitive("layer_norm"));
                }
                let mut dx = self.take_buf(temp, *x);
                let mut dg = self.take_buf(temp, *gamma);
                let mut db = self.take_buf(temp, *beta);
                kernels::layer_norm_bwd(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    stats,
                    g,
                    *n,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                Self::put_buf(temp, *x, dx);
                Self::put_buf(temp, *gamma, dg);
                Self::put_buf(temp, *beta, db);
            }
            Op::BatchNorm { x, gamma, beta, mean, var, eps, channels, plane } => {
                let (c, p) = (*channels, *plane);
                let gv = self.value(*gamma).to_f64_vec();
                let mv = self.value(*mean).to_f64_vec();
                let vv = self.value(*var).to_f64_vec();
                let rstd: Vec<f64> = vv.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                self.elementwise(temp, *x, g, |j| {
                    let ch = (j / p) % c;
                    gv[ch] * rstd[ch]
                });
                let xv = self.value(*x).data();
                let mut sg = vec![0.0f64; c];
                let mut sb = vec![0.0f64; c];
                for (j, v) in g.iter().enumerate() {
                    let ch = (j / p) % c;
                    sg[ch] += v.widen() * (xv[j].widen() - mv[ch]) * rstd[ch];
                    sb[ch] += v.widen();
                }
                for (var_, sums) in [(*gamma, sg), (*beta, sb)] {
                    if let Some(mut d) = self.take_buf(temp, var_) {
                        for (dst, s) in d.iter_mut().zip(sums) {
                            *dst = S::narrow(dst.widen() + s);
                        }
                        Self::put_buf(temp, var_, Some(d));
                    }
                }
            }
            Op::MaxPool { x, dims, argmax } => {
                if let Some(mut dx) = self.take_buf(temp, *x) {
                    match reference {
                        Some(r) => {
                            // Output delta is a convex combination of the deltas at
                            // the input and reference argmaxes, so splitting the
                            // upstream multiplier between them conserves the total.
                            let xv = self.value(*x).data();
                            let rx = r.value(*x).data();
                            let (_, rarg) = kernels::max_pool_fwd(rx, dims);
                            let y = node.value.data();
                            let ry = r.nodes[i].value.data();
                            for (o, (&ia, &ib)) in argmax.iter().zip(&rarg).enumerate() {
                                let go = g[o].widen();
                                if ia == ib {
                                    dx[ia] = S::narrow(dx[ia].widen() + go);
                                    continue;
                                }
                                let da = xv[ia].widen() - rx[ia].widen();
                                let db = xv[ib].widen() - rx[ib].widen();
                                let dy = y[o].widen() - ry[o].widen();
                                let t = if (da - db).abs() < RESCALE_EPS {
                                    1.0
                                } else {
                                    ((dy - db) / (da - db)).clamp(0.0, 1.0)
                                };
                                dx[ia] = S::narrow(dx[ia].widen() + go * t);
                                dx[ib] = S::narrow(dx[ib].widen() + go * (1.0 - t));
                            }
                        }
                        None => {
                            for (o, &ia) in argmax.iter().enumerate() {
                                dx[ia] = dx[ia] + g[o];
                            }
                        }
                    }
                    Self::put_buf(temp, *x, Some(dx));
                }
            }
            Op::AvgPool { x, dims } => {
                if let Some(mut dx) = self.take_buf(temp, *x) {
                    kernels::avg_pool_bwd(g, dims, &mut dx);
                    Self::put_buf(temp, *x, Some(dx));
                }
            }
            Op::GlobalAvgPool { x, size } => {
                let inv = 1.0 / *size as f64;
                let sz = *size;
                if let Some(mut dx) = self.take_buf(temp, *x) {
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d = S::narrow(d.widen() + g[j / sz].widen() * inv);
                    }
                    Self::put_buf(temp, *x, Some(dx));
                }
            }
            Op::View { x } => self.elementwise(temp, *x, g, |_| 1.0),
            Op::Transpose { x, perm } => {
                if let Some(mut dx) = self.take_buf(temp, *x) {
                    let back = kernels::transpose(g, node.value.shape(), &kernels::inverse_perm(perm));
                    for (d, v) in dx.iter_mut().zip(back) {
                        *d = *d + v;
                    }
                    Self::put_buf(temp, *x, Some(dx));
                }
            }
            Op::Concat { inputs, outer, inner_sizes } => {
                let total: usize = inner_sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(inner_sizes) {
                    if let Some(mut dv) = self.take_buf(temp, v) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + sz];
                            for (d, s) in dv[o * sz..(o + 1) * sz].iter_mut().zip(src) {
                                *d = *d + *s;
                            }
                        }
                        Self::put_buf(temp, v, Some(dv));
                    }
                    offset += sz;
                }
            }
            Op::Roll { x, axis, shift } => {
                if let Some(mut dx) = self.take_buf(temp, *x) {
                    let back = kernels::roll(g, node.value.shape(), *axis, -*shift);
                    for (d, v) in dx.iter_mut().zip(back) {
                        *d = *d + v;
                    }
                    Self::put_buf(temp, *x, Some(dx));
                }
            }
            Op::Sum { x } => {
                let g0 = g[0].widen();
                if let Some(mut dx) = self.take_buf(temp, *x) {
                    for d in dx.iter_mut() {
                        *d = S::narrow(d.widen() + g0);
                    }
                    Self::put_buf(temp, *x, Some(dx));
                }
            }
            Op::SoftmaxXent { x, probs, labels, weights, norm } => {
                if reference.is_some() && !linearize {
                    return Err(TensorError::UnsupportedPrimitive("softmax_cross_entropy"));
                }
                let classes = probs.len() / labels.len();
                let g0 = g[0].widen();
                if let Some(mut dx) = self.take_buf(temp, *x) {
                    for (j, d) in dx.iter_mut().enumerate() {
                        let (r, c) = (j / classes, j % classes);
                        let target = if labels[r] == c { 1.0 } else { 0.0 };
                        *d = S::narrow(d.widen() + g0 * weights[r] * (probs[j] - target) / norm);
                    }
                    Self::put_buf(temp, *x, Some(dx));
                }
            }
        }
        Ok(())
    }

    /// Operand value for product rules; the midpoint against the reference
    /// under DeepLIFT (exact for bilinear maps).
    fn operand(&self, v: Var, reference: Option<&Graph<S>>) -> Vec<f64> {
        match reference {
            Some(r) => self
                .value(v)
                .data()
                .iter()
                .zip(r.value(v).data())
                .map(|(a, b)| 0.5 * (a.widen() + b.widen()))
                .collect(),
            None => self.value(v).to_f64_vec(),
        }
    }

    fn midpoint(&self, v: Var, reference: &Graph<S>) -> Vec<S> {
        let a = self.value(v).data();
        let b = reference.value(v).data();
        if a == b {
            return a.to_vec();
        }
        a.iter().zip(b).map(|(x, y)| S::narrow(0.5 * (x.widen() + y.widen()))).collect()
    }
}

fn with_bias(x: Var, w: Var, bias: Option<Var>) -> Vec<Var> {
    let mut v = vec![x, w];
    v.extend(bias);
    v
}

fn unsupported(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::UnsupportedAttribute {
        op,
        detail: detail.into(),
    }
}

/// Rescale multipliers Δy/Δx for a single-input elementwise nonlinearity.
fn rescale<S: Scalar>(
    xv: &[S],
    yv: &[S],
    reference: &Graph<S>,
    x: Var,
    y: Var,
    grad: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let rx = reference.value(x).data();
    let ry = reference.value(y).data();
    xv.iter()
        .zip(yv)
        .zip(rx.iter().zip(ry))
        .map(|((&x0, &y0), (&x1, &y1))| {
            let dx = x0.widen() - x1.widen();
            if dx.abs() < RESCALE_EPS {
                grad(x0.widen())
            } else {
                (y0.widen() - y1.widen()) / dx
            }
        })
        .collect()
}
