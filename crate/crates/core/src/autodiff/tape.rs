//! Dynamic reverse-mode tape.
//!
//! Every primitive appends one node holding its output value. A forward pass
//! builds a fresh tape; `backward` walks it once in reverse insertion order,
//! which is a valid reverse topological order because inputs always precede
//! the nodes that consume them.

use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::kernels::{self, ConvDims};
use crate::autodiff::tensor::numel;
use crate::autodiff::{GradMap, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Default negative slope of `leaky_relu`.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv1d,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Sum,
    Mean,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
    Softplus,
    SoftmaxRows,
    GatherRows,
    ScatterAddRows,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 22] = [
        PrimitiveKind::Add,
        PrimitiveKind::Sub,
        PrimitiveKind::Mul,
        PrimitiveKind::Div,
        PrimitiveKind::MatMul,
        PrimitiveKind::Conv1d,
        PrimitiveKind::Concat,
        PrimitiveKind::Slice,
        PrimitiveKind::Reshape,
        PrimitiveKind::Transpose,
        PrimitiveKind::Sum,
        PrimitiveKind::Mean,
        PrimitiveKind::Exp,
        PrimitiveKind::Log,
        PrimitiveKind::Sigmoid,
        PrimitiveKind::Tanh,
        PrimitiveKind::Relu,
        PrimitiveKind::LeakyRelu,
        PrimitiveKind::Softplus,
        PrimitiveKind::SoftmaxRows,
        PrimitiveKind::GatherRows,
        PrimitiveKind::ScatterAddRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Div => "div",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Conv1d => "conv1d",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Slice => "slice",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::Transpose => "transpose",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::Exp => "exp",
            PrimitiveKind::Log => "log",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Tanh => "tanh",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::LeakyRelu => "leaky_relu",
            PrimitiveKind::Softplus => "softplus",
            PrimitiveKind::SoftmaxRows => "softmax_rows",
            PrimitiveKind::GatherRows => "gather_rows",
            PrimitiveKind::ScatterAddRows => "scatter_add_rows",
        }
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PrimitiveKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Attributes for [`Tape::forward_op`]. Only the fields a primitive reads
/// need to be set.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub slope: Option<f64>,
    pub indices: Option<Arc<[usize]>>,
    pub rows: Option<usize>,
}

impl Attrs {
    pub fn axis(axis: usize) -> Self {
        Attrs {
            axis: Some(axis),
            ..Default::default()
        }
    }

    pub fn range(axis: usize, start: usize, end: usize) -> Self {
        Attrs {
            axis: Some(axis),
            start: Some(start),
            end: Some(end),
            ..Default::default()
        }
    }

    pub fn shape(shape: Vec<usize>) -> Self {
        Attrs {
            shape: Some(shape),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    SoftmaxRows(Var),
    GatherRows {
        x: Var,
        idx: Arc<[usize]>,
    },
    ScatterAddRows {
        x: Var,
        idx: Arc<[usize]>,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records primitive applications for one forward pass.
pub struct Tape<'p, R: Real> {
    nodes: Vec<Node<R>>,
    params: Option<&'p ParamStore<R>>,
    bound: Vec<Option<Var>>,
    track_params: bool,
}

impl<R: Real> Default for Tape<'_, R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, R: Real> Tape<'p, R> {
    /// A tape with no parameter store; only constants can be added.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
            track_params: false,
        }
    }

    /// A tape reading parameters from `store`. With `track` unset the
    /// parameters are treated as constants (inference).
    pub fn with_params(store: &'p ParamStore<R>, track: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            params: Some(store),
            bound: vec![None; store.len()],
            track_params: track,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(R::from_f64(value)))
    }

    /// Leaf for a stored parameter; bound once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let value = store.value(id).clone();
        let v = self.push(value, Op::Leaf, self.track_params);
        self.nodes[v.0].param = Some(id);
        self.bound[id.0] = Some(v);
        v
    }

    fn push(&mut self, value: Tensor<R>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic entry point dispatching on a primitive kind.
    pub fn forward_op(
        &mut self,
        kind: PrimitiveKind,
        inputs: &[Var],
        attrs: &Attrs,
    ) -> Result<Var> {
        let name = kind.name();
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Invalid(format!(
                    "{name} expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        let need =
            |o: Option<usize>, attr: &'static str| o.ok_or(Error::MissingAttr { kind: name, attr });
        match kind {
            PrimitiveKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            PrimitiveKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            PrimitiveKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            PrimitiveKind::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            PrimitiveKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            PrimitiveKind::Conv1d => match inputs.len() {
                2 => self.conv1d(inputs[0], inputs[1], None),
                3 => self.conv1d(inputs[0], inputs[1], Some(inputs[2])),
                n => Err(Error::Invalid(format!(
                    "conv1d expects 2 or 3 inputs, got {n}"
                ))),
            },
            PrimitiveKind::Concat => self.concat(inputs, need(attrs.axis, "axis")?),
            PrimitiveKind::Slice => {
                arity(1)?;
                self.slice(
                    inputs[0],
                    need(attrs.axis, "axis")?,
                    need(attrs.start, "start")?,
                    need(attrs.end, "end")?,
                )
            }
            PrimitiveKind::Reshape => {
                arity(1)?;
                let shape = attrs.shape.clone().ok_or(Error::MissingAttr {
                    kind: name,
                    attr: "shape",
                })?;
                self.reshape(inputs[0], &shape)
            }
            PrimitiveKind::Transpose => {
                arity(1)?;
                match &attrs.perm {
                    Some(p) => self.permute(inputs[0], p),
                    None => self.transpose(inputs[0]),
                }
            }
            PrimitiveKind::Sum => arity(1).and_then(|_| self.sum(inputs[0], attrs.axis)),
            PrimitiveKind::Mean => arity(1).and_then(|_| self.mean(inputs[0], attrs.axis)),
            PrimitiveKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            PrimitiveKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            PrimitiveKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            PrimitiveKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            PrimitiveKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            PrimitiveKind::LeakyRelu => {
                arity(1)?;
                self.leaky_relu(inputs[0], attrs.slope.unwrap_or(LEAKY_SLOPE))
            }
            PrimitiveKind::Softplus => arity(1).and_then(|_| self.softplus(inputs[0])),
            PrimitiveKind::SoftmaxRows => arity(1).and_then(|_| self.softmax_rows(inputs[0])),
            PrimitiveKind::GatherRows => {
                arity(1)?;
                let idx = attrs.indices.clone().ok_or(Error::MissingAttr {
                    kind: name,
                    attr: "indices",
                })?;
                self.gather_rows(inputs[0], idx)
            }
            PrimitiveKind::ScatterAddRows => {
                arity(1)?;
                let idx = attrs.indices.clone().ok_or(Error::MissingAttr {
                    kind: name,
                    attr: "indices",
                })?;
                self.scatter_add_rows(inputs[0], idx, need(attrs.rows, "rows")?)
            }
        }
    }

    fn binary(
        &mut self,
        kind: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = kernels::broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(kind, &[ta.shape(), tb.shape()]))?;
        let data = kernels::broadcast_zip(&out, ta.data(), ta.shape(), tb.data(), tb.shape(), f);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(out, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(x, s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, n, data) = kernels::matmul(
            ta.data(),
            sa[0],
            sa[1],
            false,
            tb.data(),
            sb[0],
            sb[1],
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    /// Stride-1 convolution with zero "same" padding.
    /// `x: [B, Cin, T]`, `w: [Cout, Cin, K]`, optional `bias: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let dims = self.conv_dims(x, w, bias)?;
        let data = kernels::conv1d(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        let shape = vec![dims.batch, dims.c_out, dims.len];
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Conv1d { x, w, bias },
            rg,
        ))
    }

    fn conv_dims(&self, x: Var, w: Var, bias: Option<Var>) -> Result<ConvDims> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let bad = || {
            let mut shapes = vec![sx, sw];
            if let Some(b) = bias {
                shapes.push(self.shape(b));
            }
            Error::shape("conv1d", &shapes)
        };
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(bad());
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(bad());
            }
        }
        Ok(ConvDims {
            batch: sx[0],
            c_in: sx[1],
            len: sx[2],
            c_out: sw[0],
            kernel: sw[2],
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let conform = axis < first.len()
            && shapes.iter().all(|s| {
                s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b)
            });
        if !conform {
            return Err(Error::shape("concat", &shapes));
        }
        let mut out = first.clone();
        out[axis] = shapes.iter().map(|s| s[axis]).sum();
        let refs: Vec<(&[R], &[usize])> = parts
            .iter()
            .map(|&p| (self.value(p).data(), self.shape(p)))
            .collect();
        let data = kernels::concat(&refs, axis);
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(out, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::Shape {
                kind: "slice",
                shapes: vec![s.to_vec(), vec![axis, start, end]],
            });
        }
        let mut out = s.to_vec();
        out[axis] = end - start;
        let data = kernels::slice(self.value(x).data(), s, axis, start, end);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out, data),
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if shape.is_empty() || shape.contains(&0) || numel(shape) != numel(s) {
            return Err(Error::shape("reshape", &[s, shape]));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x), rg))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", &[self.shape(x)]));
        }
        self.permute(x, &[1, 0])
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm
                .iter()
                .all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("transpose", &[s, perm]));
        }
        let (out, data) = kernels::permute(self.value(x).data(), s, perm);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    fn reduced_shape(&self, kind: &'static str, x: Var, axis: Option<usize>) -> Result<Vec<usize>> {
        let s = self.shape(x);
        match axis {
            None => Ok(vec![1]),
            Some(a) if a < s.len() => {
                let mut out: Vec<usize> = s
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != a)
                    .map(|(_, &d)| d)
                    .collect();
                if out.is_empty() {
                    out.push(1);
                }
                Ok(out)
            }
            Some(a) => Err(Error::Shape {
                kind,
                shapes: vec![s.to_vec(), vec![a]],
            }),
        }
    }

    /// Sum over one axis (removed from the shape) or over everything.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let out = self.reduced_shape("sum", x, axis)?;
        let t = self.value(x);
        let data = match axis {
            None => vec![t.data().iter().copied().sum()],
            Some(a) => kernels::sum_axis(t.data(), t.shape(), a),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out, data), Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let out = self.reduced_shape("mean", x, axis)?;
        let t = self.value(x);
        let count = match axis {
            None => t.len(),
            Some(a) => t.shape()[a],
        };
        let inv = R::one() / R::from_f64(count as f64);
        let data = match axis {
            None => vec![t.data().iter().copied().sum::<R>() * inv],
            Some(a) => kernels::sum_axis(t.data(), t.shape(), a)
                .into_iter()
                .map(|v| v * inv)
                .collect(),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out, data), Op::Mean { x, axis }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.exp(), Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= R::zero()) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, kernels::sigmoid, Op::Sigmoid(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.tanh(), Op::Tanh(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.max(R::zero()), Op::Relu(x)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = R::from_f64(slope);
        Ok(self.unary(
            x,
            move |v| if v > R::zero() { v } else { v * s },
            Op::LeakyRelu(x, slope),
        ))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, kernels::softplus, Op::Softplus(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().expect("rank >= 1");
        let data = kernels::softmax_rows(t.data(), cols);
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SoftmaxRows(x), rg))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let s = self.shape(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::Shape {
                kind: "gather_rows",
                shapes: vec![s.to_vec(), vec![idx.len()]],
            });
        }
        let width = numel(&s[1..]);
        let mut out = s.to_vec();
        out[0] = idx.len();
        let data = kernels::gather_rows(self.value(x).data(), width, &idx);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out, data), Op::GatherRows { x, idx }, rg))
    }

    /// Sums row `e` of `x` into output row `idx[e]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Arc<[usize]>, rows: usize) -> Result<Var> {
        let s = self.shape(x);
        if rows == 0 || idx.len() != s[0] || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape {
                kind: "scatter_add_rows",
                shapes: vec![s.to_vec(), vec![idx.len(), rows]],
            });
        }
        let width = numel(&s[1..]);
        let mut out = s.to_vec();
        out[0] = rows;
        let data = kernels::scatter_add_rows(self.value(x).data(), width, &idx, rows);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out, data),
            Op::ScatterAddRows { x, idx },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Returns one gradient per parameter
    /// of the attached store; parameters the root does not reach get zeros.
    pub fn backward(&self, root: Var) -> Result<GradMap<R>> {
        let grads = self.backward_nodes(root)?;
        let Some(store) = self.params else {
            return Ok(GradMap {
                grads: Vec::new(),
                names: Vec::new(),
            });
        };
        let mut out: Vec<Option<Tensor<R>>> = store
            .iter()
            .map(|(_, p)| Some(Tensor::zeros(p.value.shape())))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &grads[i]) {
                out[id.0] = Some(g.clone());
            }
        }
        Ok(GradMap::from_store(store, out))
    }

    /// Gradients of the root with respect to every node that requires grad.
    pub fn backward_nodes(&self, root: Var) -> Result<Vec<Option<Tensor<R>>>> {
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(grads);
        }
        grads[root.0] = Some(Tensor::full(rs.to_vec(), R::one()));
        let mut leaf_grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(leaf_grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<R>>], v: Var, data: Vec<R>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.shape(v).to_vec();
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot => *slot = Some(Tensor::from_parts(shape, data)),
        }
    }

    fn propagate(&self, node: &Node<R>, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let out_shape = node.value.shape();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, kernels::reduce_to(gd, out_shape, self.shape(*a)));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = kernels::reduce_to(gd, out_shape, self.shape(*b));
                    if neg {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let full = kernels::broadcast_zip(
                        out_shape,
                        gd,
                        out_shape,
                        tb.data(),
                        tb.shape(),
                        |x, y| x * y,
                    );
                    self.accumulate(grads, *a, kernels::reduce_to(&full, out_shape, ta.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    let full = kernels::broadcast_zip(
                        out_shape,
                        gd,
                        out_shape,
                        ta.data(),
                        ta.shape(),
                        |x, y| x * y,
                    );
                    self.accumulate(grads, *b, kernels::reduce_to(&full, out_shape, tb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let full = kernels::broadcast_zip(
                        out_shape,
                        gd,
                        out_shape,
                        tb.data(),
                        tb.shape(),
                        |x, y| x / y,
                    );
                    self.accumulate(grads, *a, kernels::reduce_to(&full, out_shape, ta.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let q = kernels::broadcast_zip(
                        out_shape,
                        gd,
                        out_shape,
                        node.value.data(),
                        out_shape,
                        |x, y| x * y,
                    );
                    let full = kernels::broadcast_zip(
                        out_shape,
                        &q,
                        out_shape,
                        tb.data(),
                        tb.shape(),
                        |x, y| -x / y,
                    );
                    self.accumulate(grads, *b, kernels::reduce_to(&full, out_shape, tb.shape()));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let (_, _, ga) = kernels::matmul(gd, m, n, false, tb.data(), k, n, true);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let (_, _, gb) = kernels::matmul(ta.data(), m, k, true, gd, m, n, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv1d { x, w, bias } => {
                let dims = self.conv_dims(*x, *w, *bias).expect("validated in forward");
                let (gx, gw, gb) = kernels::conv1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    &dims,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.nodes[p.0].requires_grad {
                        let piece = kernels::slice(gd, out_shape, *axis, offset, offset + len);
                        self.accumulate(grads, *p, piece);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let gx = kernels::unslice(gd, self.shape(*x), *axis, *start, *end);
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, gx) = kernels::permute(gd, out_shape, &inv);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let s = self.shape(*x);
                let mean = matches!(node.op, Op::Mean { .. });
                let gx = match axis {
                    None => {
                        let scale = if mean {
                            R::from_f64(1.0 / numel(s) as f64)
                        } else {
                            R::one()
                        };
                        vec![gd[0] * scale; numel(s)]
                    }
                    Some(a) => {
                        let scale = if mean {
                            R::from_f64(1.0 / s[*a] as f64)
                        } else {
                            R::one()
                        };
                        kernels::expand_axis(gd, s, *a, scale)
                    }
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g / v)
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y * (R::one() - y))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * (R::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > R::zero() { g } else { R::zero() })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = R::from_f64(*slope);
                let gx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > R::zero() { g } else { g * s })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * kernels::sigmoid(v))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let cols = *out_shape.last().expect("rank >= 1");
                let gx = kernels::softmax_rows_backward(node.value.data(), gd, cols);
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let s = self.shape(*x);
                let gx = kernels::scatter_add_rows(gd, numel(&s[1..]), idx, s[0]);
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterAddRows { x, idx } => {
                let gx = kernels::gather_rows(gd, numel(&out_shape[1..]), idx);
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
