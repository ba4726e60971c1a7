use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Exp,
    Log,
    Neg,
    Abs,
    Sqrt,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    /// `max(x, floor)`; gradient passes only where `x >= floor`.
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug)]
enum Rhs {
    Var(Var),
    Const(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Rhs,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    Softmax {
        a: Var,
        classes: usize,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    /// View `a` as `[outer, reduce, inner]` and average the middle axis.
    MeanAxis {
        a: Var,
        outer: usize,
        reduce: usize,
        inner: usize,
    },
    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    AddBias {
        a: Var,
        bias: Var,
        channels: usize,
        inner: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        channels: usize,
        inner: usize,
    },
    /// `out[i] = a[index[i]]`.
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    /// Concatenation along axis 1.
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
                BinaryKind::Pow => "pow",
                BinaryKind::Max => "max",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Neg => "neg",
                UnaryKind::Abs => "abs",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Relu => "relu",
                UnaryKind::LeakyRelu(_) => "leaky_relu",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Tanh => "tanh",
                UnaryKind::ClampMin(_) => "clamp_min",
            },
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Softmax { .. } => "softmax",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::AddBias { .. } => "add_bias",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } => match b {
                Rhs::Var(b) => vec![*a, *b],
                Rhs::Const(_) => vec![*a],
            },
            Op::Unary { a, .. }
            | Op::Softmax { a, .. }
            | Op::Reshape { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanAxis { a, .. }
            | Op::Gather { a, .. } => vec![*a],
            Op::MaxPool { input, .. } | Op::AvgPool { input, .. } => vec![*input],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::AddBias { a, bias, .. } => vec![*a, *bias],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Append-only tape of primitive applications.
///
/// Node `i`'s parents always have indices `< i`, so a reverse index sweep is a
/// valid reverse topological order and visits each node once.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    precision: Precision,
    params: BTreeMap<String, Var>,
    buffer_updates: Vec<(String, Tensor)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::Oracle)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            precision,
            params: BTreeMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Parents of `v` on the tape.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named parameter leaf; re-registering a name returns the same node.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Named parameter leaves registered on this graph, in name order.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Gradients of every trainable named parameter after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Queue a non-differentiable state update (e.g. running statistics).
    pub fn push_buffer_update(&mut self, name: String, value: Tensor) {
        self.buffer_updates.push((name, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Result<Var> {
        self.precision.round_slice(value.data_mut());
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node,
                op: op.name(),
                phase: "",
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    // ---- elementwise -------------------------------------------------------

    /// Elementwise binary op; `b` must match `a`'s shape or hold one element.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb && self.value(b).numel() != 1 {
            return Err(Error::shape(
                "elementwise",
                format!("{sa:?} vs {sb:?} (only scalar broadcasting is supported)"),
            ));
        }
        let scalar = sa != sb;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = if scalar {
            let s = bv[0];
            av.iter()
                .map(|&x| apply_binary(kind, x, s))
                .collect::<Result<Vec<_>>>()?
        } else {
            av.iter()
                .zip(bv)
                .map(|(&x, &y)| apply_binary(kind, x, y))
                .collect::<Result<Vec<_>>>()?
        };
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::new(shape, data)?,
            Op::Binary {
                kind,
                a,
                b: Rhs::Var(b),
            },
        )
    }

    /// Elementwise op against a constant scalar.
    pub fn binary_scalar(&mut self, kind: BinaryKind, a: Var, s: f64) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| apply_binary(kind, x, s))
            .collect::<Result<Vec<_>>>()?;
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::new(shape, data)?,
            Op::Binary {
                kind,
                a,
                b: Rhs::Const(s),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.binary_scalar(BinaryKind::Add, a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.binary_scalar(BinaryKind::Mul, a, s)
    }

    pub fn pow_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.binary_scalar(BinaryKind::Pow, a, s)
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Result<Var> {
        let neg = self.unary(UnaryKind::Neg, a)?;
        self.add_scalar(neg, s)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| apply_unary(kind, x))
            .collect::<Result<Vec<_>>>()?;
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Unary { kind, a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new([m, n], data)?, Op::MatMul { a, b })
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] != sk[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?} with kernel {sk:?}"),
            ));
        }
        let geom = ConvGeom::new([si[0], si[1], si[2], si[3]], sk[0], sk[2], stride, padding)
            .ok_or_else(|| {
                Error::shape(
                    "conv2d",
                    format!(
                        "kernel {}x{} (stride {stride}) does not fit input {}x{} with padding {padding}",
                        sk[2], sk[3], si[2], si[3]
                    ),
                )
            })?;
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        self.push(
            Tensor::new([geom.n, geom.f, geom.oh, geom.ow], data)?,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
        )
    }

    pub fn pool2d(&mut self, kind: PoolKind, input: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::shape("pool2d", format!("expected [N,C,H,W], got {s:?}")));
        }
        let geom = PoolGeom::new(s[0] * s[1], s[2], s[3], k, stride).ok_or_else(|| {
            Error::shape(
                "pool2d",
                format!("window {k}x{k} stride {stride} does not fit {}x{}", s[2], s[3]),
            )
        })?;
        let shape = [s[0], s[1], geom.oh, geom.ow];
        match kind {
            PoolKind::Max => {
                let (data, argmax) = kernels::max_pool_forward(self.value(input).data(), &geom);
                self.push(Tensor::new(shape, data)?, Op::MaxPool { input, argmax })
            }
            PoolKind::Avg => {
                let data = kernels::avg_pool_forward(self.value(input).data(), &geom);
                self.push(Tensor::new(shape, data)?, Op::AvgPool { input, geom })
            }
        }
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let classes = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.chunks(classes).zip(out.chunks_mut(classes)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { a, classes })
    }

    // ---- shape and reductions ---------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean { a })
    }

    /// Mean over `H,W` of an `[N,C,H,W]` tensor, giving `[N,C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("mean_spatial", format!("expected rank 4, got {s:?}")));
        }
        self.mean_axis(a, s[0] * s[1], s[2] * s[3], 1, vec![s[0], s[1]])
    }

    /// Mean over the leading axis of an `[N,D]` tensor, giving `[D]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("mean_rows", format!("expected rank 2, got {s:?}")));
        }
        self.mean_axis(a, 1, s[0], s[1], vec![s[1]])
    }

    fn mean_axis(
        &mut self,
        a: Var,
        outer: usize,
        reduce: usize,
        inner: usize,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..reduce {
                let src = &x[(o * reduce + r) * inner..(o * reduce + r + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let n = reduce as f64;
        for v in &mut out {
            *v /= n;
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::MeanAxis {
                a,
                outer,
                reduce,
                inner,
            },
        )
    }

    /// Adds a per-channel bias `[C]` along axis 1 of `[N,C,...]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let sb = self.shape(bias);
        if s.len() < 2 || sb != [s[1]] {
            return Err(Error::shape("add_bias", format!("{s:?} with bias {sb:?}")));
        }
        let channels = s[1];
        let inner: usize = s[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        self.push(
            Tensor::new(s, data)?,
            Op::AddBias {
                a,
                bias,
                channels,
                inner,
            },
        )
    }

    /// Per-channel normalization of `[N,C,...]`.
    ///
    /// With `stats = None` the batch statistics (biased variance over every
    /// axis except 1) are used and returned; otherwise the given running
    /// statistics are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<&BatchStats>,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{s:?} with gamma {:?} beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (n, channels) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let count = (n * inner) as f64;

        let observed = match stats {
            Some(st) => st.clone(),
            None => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let base = (b * channels + c) * inner;
                        acc += xv[base..base + inner].iter().sum::<f64>();
                    }
                    mean[c] = acc / count;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * channels + c) * inner;
                        sq += xv[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f64>();
                    }
                    var[c] = sq / count;
                }
                BatchStats { mean, var }
            }
        };

        let inv_std: Vec<f64> = observed.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (h, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let c = (i / inner) % channels;
            *h = (v - observed.mean[c]) * inv_std[c];
            *o = gv[c] * *h + bv[c];
        }
        let var = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
                channels,
                inner,
            },
        )?;
        Ok((var, observed))
    }

    /// `out[i] = a[index[i]]`, with the given output shape.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of bounds for {} elements", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(t, Op::Gather { a, index })
    }

    /// Picks `a[i, labels[i]]` from an `[N,K]` tensor, giving `[N]`.
    pub fn select_columns(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "select_columns",
                format!("{s:?} with {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::shape(
                "select_columns",
                format!("column {bad} out of range for {} columns", s[1]),
            ));
        }
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| i * s[1] + l)
            .collect();
        self.gather(a, index, &[s[0]])
    }

    /// Copies a `[D]` vector into every row of an `[N,D]` tensor.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 {
            return Err(Error::shape("repeat_rows", format!("expected rank 1, got {s:?}")));
        }
        let d = s[0];
        let index = (0..rows * d).map(|i| i % d).collect();
        self.gather(a, index, &[rows, d])
    }

    /// Repeats a single-channel `[N,1,H,W]` map into `[N,C,H,W]`.
    pub fn repeat_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(
                "repeat_channels",
                format!("expected [N,1,H,W], got {s:?}"),
            ));
        }
        let plane = s[2] * s[3];
        let mut index = Vec::with_capacity(s[0] * channels * plane);
        for n in 0..s[0] {
            for _ in 0..channels {
                index.extend((0..plane).map(|p| n * plane + p));
            }
        }
        self.gather(a, index, &[s[0], channels, s[2], s[3]])
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for r in start..start + len {
                let base = (o * s[axis] + r) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut shape = s;
        shape[axis] = len;
        self.gather(a, index, &shape)
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("expected rank 4, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut index = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    index.push((p * h + y / 2) * w + x / 2);
                }
            }
        }
        self.gather(a, index, &[s[0], s[1], 2 * h, 2 * w])
    }

    /// Concatenation along axis 1; all other extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", format!("rank {} input", first.len())));
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != outer || s[2..] != first[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            spans.push((p, s[1]));
            total += s[1];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, c) in &spans {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: spans,
                outer,
                inner,
            },
        )
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`, populating gradients on
    /// every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NotScalar(ls.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::NoTape(format!(
                "node #{} ({}) does not depend on any differentiable leaf",
                loss.0,
                self.op_name(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.node_backward(idx, &g)?;
            grads[idx] = Some(g);
            for (parent, mut pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                self.precision.round_slice(pg.data_mut());
                if !pg.is_finite() {
                    return Err(Error::NonFinite {
                        node: idx,
                        op: self.nodes[idx].op.name(),
                        phase: " during backward",
                    });
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += v;
                        }
                        self.precision.round_slice(acc.data_mut());
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data);

        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let av = val(*a).data();
                let (bvals, b_var): (Vec<f64>, Option<Var>) = match b {
                    Rhs::Const(s) => (vec![*s], None),
                    Rhs::Var(v) => (val(*v).data().to_vec(), Some(*v)),
                };
                let broadcast = match b {
                    Rhs::Const(_) => true,
                    Rhs::Var(v) => val(*v).shape() != val(*a).shape(),
                };
                let bat = |i: usize| if broadcast { bvals[0] } else { bvals[i] };
                let od = out.data();
                if want(*a) {
                    let da: Vec<f64> = (0..av.len())
                        .map(|i| gd[i] * binary_grad_lhs(*kind, av[i], bat(i), od[i]))
                        .collect();
                    res.push((*a, like(*a, da)?));
                }
                if let Some(bv) = b_var.filter(|&v| want(v)) {
                    let terms = (0..av.len()).map(|i| gd[i] * binary_grad_rhs(*kind, av[i], bat(i), od[i]));
                    let db = if broadcast {
                        vec![terms.sum()]
                    } else {
                        terms.collect()
                    };
                    res.push((bv, like(bv, db)?));
                }
            }
            Op::Unary { kind, a } => {
                let av = val(*a).data();
                let od = out.data();
                let da = (0..av.len())
                    .map(|i| gd[i] * unary_grad(*kind, av[i], od[i]))
                    .collect();
                res.push((*a, like(*a, da)?));
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    let da = kernels::matmul_bt(gd, val(*b).data(), m, n, k);
                    res.push((*a, like(*a, da)?));
                }
                if want(*b) {
                    let db = kernels::matmul_at(val(*a).data(), gd, m, k, n);
                    res.push((*b, like(*b, db)?));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (dx, dk) = kernels::conv2d_backward(
                    val(*input).data(),
                    val(*kernel).data(),
                    gd,
                    geom,
                    want(*input),
                    want(*kernel),
                );
                if let Some(dx) = dx {
                    res.push((*input, like(*input, dx)?));
                }
                if let Some(dk) = dk {
                    res.push((*kernel, like(*kernel, dk)?));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; val(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                res.push((*input, like(*input, dx)?));
            }
            Op::AvgPool { input, geom } => {
                let dx = kernels::avg_pool_backward(gd, geom);
                res.push((*input, like(*input, dx)?));
            }
            Op::Softmax { a, classes } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks(*classes)
                    .zip(gd.chunks(*classes))
                    .zip(dx.chunks_mut(*classes))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                res.push((*a, like(*a, dx)?));
            }
            Op::Reshape { a } => res.push((*a, like(*a, gd.to_vec())?)),
            Op::Sum { a } => {
                let n = val(*a).numel();
                res.push((*a, like(*a, vec![gd[0]; n])?));
            }
            Op::Mean { a } => {
                let n = val(*a).numel();
                res.push((*a, like(*a, vec![gd[0] / n as f64; n])?));
            }
            Op::MeanAxis {
                a,
                outer,
                reduce,
                inner,
            } => {
                let scale = 1.0 / *reduce as f64;
                let mut dx = vec![0.0; outer * reduce * inner];
                for o in 0..*outer {
                    for r in 0..*reduce {
                        for i in 0..*inner {
                            dx[(o * reduce + r) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                res.push((*a, like(*a, dx)?));
            }
            Op::AddBias {
                a,
                bias,
                channels,
                inner,
            } => {
                if want(*a) {
                    res.push((*a, like(*a, gd.to_vec())?));
                }
                if want(*bias) {
                    let mut db = vec![0.0; *channels];
                    for (i, &gv) in gd.iter().enumerate() {
                        db[(i / inner) % channels] += gv;
                    }
                    res.push((*bias, like(*bias, db)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels,
                inner,
            } => {
                let c = *channels;
                let ch = |i: usize| (i / inner) % c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, &gv) in gd.iter().enumerate() {
                    dgamma[ch(i)] += gv * xhat[i];
                    dbeta[ch(i)] += gv;
                }
                if want(*x) {
                    let gam = val(*gamma).data();
                    let dx: Vec<f64> = if *batch_stats {
                        let count = (gd.len() / c) as f64;
                        let mut sum_dxhat = vec![0.0; c];
                        let mut sum_dxhat_xhat = vec![0.0; c];
                        for (i, &gv) in gd.iter().enumerate() {
                            let d = gv * gam[ch(i)];
                            sum_dxhat[ch(i)] += d;
                            sum_dxhat_xhat[ch(i)] += d * xhat[i];
                        }
                        (0..gd.len())
                            .map(|i| {
                                let k = ch(i);
                                let d = gd[i] * gam[k];
                                inv_std[k] / count
                                    * (count * d - sum_dxhat[k] - xhat[i] * sum_dxhat_xhat[k])
                            })
                            .collect()
                    } else {
                        (0..gd.len())
                            .map(|i| gd[i] * gam[ch(i)] * inv_std[ch(i)])
                            .collect()
                    };
                    res.push((*x, like(*x, dx)?));
                }
                if want(*gamma) {
                    res.push((*gamma, like(*gamma, dgamma)?));
                }
                if want(*beta) {
                    res.push((*beta, like(*beta, dbeta)?));
                }
            }
            Op::Gather { a, index } => {
                let mut dx = vec![0.0; val(*a).numel()];
                for (&src, &gv) in index.iter().zip(gd) {
                    dx[src] += gv;
                }
                res.push((*a, like(*a, dx)?));
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if want(p) {
                        let mut dp = Vec::with_capacity(outer * c * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[base..base + c * inner]);
                        }
                        res.push((p, like(p, dp)?));
                    }
                    offset += c;
                }
            }
        }
        Ok(res)
    }
}

fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> Result<f64> {
    Ok(match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => {
            if y == 0.0 {
                return Err(Error::domain("div", format!("{x} / 0")));
            }
            x / y
        }
        BinaryKind::Pow => {
            if x < 0.0 && y.fract() != 0.0 {
                return Err(Error::domain("pow", format!("negative base {x} with exponent {y}")));
            }
            x.powf(y)
        }
        BinaryKind::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
    })
}

fn binary_grad_lhs(kind: BinaryKind, x: f64, y: f64, _out: f64) -> f64 {
    match kind {
        BinaryKind::Add | BinaryKind::Sub => 1.0,
        BinaryKind::Mul => y,
        BinaryKind::Div => 1.0 / y,
        BinaryKind::Pow => {
            if y == 0.0 || (x == 0.0 && y > 0.0 && y < 1.0) {
                // constant power, or the subgradient 0 at the cusp of x^y, 0<y<1
                0.0
            } else {
                y * x.powf(y - 1.0)
            }
        }
        BinaryKind::Max => {
            if x >= y {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn binary_grad_rhs(kind: BinaryKind, x: f64, y: f64, out: f64) -> f64 {
    match kind {
        BinaryKind::Add => 1.0,
        BinaryKind::Sub => -1.0,
        BinaryKind::Mul => x,
        BinaryKind::Div => -x / (y * y),
        BinaryKind::Pow => {
            if x > 0.0 {
                out * x.ln()
            } else {
                0.0
            }
        }
        BinaryKind::Max => {
            if x >= y {
                0.0
            } else {
                1.0
            }
        }
    }
}

fn apply_unary(kind: UnaryKind, x: f64) -> Result<f64> {
    Ok(match kind {
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => {
            if x <= 0.0 {
                return Err(Error::domain("log", format!("log({x})")));
            }
            x.ln()
        }
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => {
            if x < 0.0 {
                return Err(Error::domain("sqrt", format!("sqrt({x})")));
            }
            x.sqrt()
        }
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::ClampMin(floor) => x.max(floor),
    })
}

fn unary_grad(kind: UnaryKind, x: f64, out: f64) -> f64 {
    match kind {
        UnaryKind::Exp => out,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Neg => -1.0,
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sqrt => {
            if out > 0.0 {
                0.5 / out
            } else {
                0.0
            }
        }
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::LeakyRelu(slope) => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        UnaryKind::Sigmoid => out * (1.0 - out),
        UnaryKind::Tanh => 1.0 - out * out,
        UnaryKind::ClampMin(floor) => {
            if x >= floor {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
