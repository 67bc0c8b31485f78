//! Dense `f64` tensors with a reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value,
//! the operation tag and references to its operands. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] simply walks it in reverse.
//!
//! Leaves created with [`Graph::leaf`] carry a persistent gradient buffer.
//! Backward passes *accumulate* into those buffers, so running backward twice
//! without resetting doubles every leaf gradient.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("function is not deterministic: baseline evaluations differ ({0} vs {1})")]
    Nondeterministic(f64, f64),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid(
                "tensor",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(invalid(
                op,
                format!("expected a 2-D tensor, got {:?}", self.shape),
            )),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    /// Back-to-back spans for sequences of the given lengths.
    pub fn packed(lens: &[usize]) -> Vec<Span> {
        let mut start = 0;
        lens.iter()
            .map(|&len| {
                let s = Span { start, len };
                start += len;
                s
            })
            .collect()
    }

    pub fn end(self) -> usize {
        self.start + self.len
    }
}

/// Fused multi-head scaled dot-product attention layout.
///
/// Query group `g` is rows `q_spans[g]` of `q`. It attends to key group
/// `kv_group[g]`, rows `kv_spans[kv_group[g]]` of `k` and `v`, and when
/// `causal` only to key positions `<=` its own position in the group.
/// Query rows outside every span produce zeros.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub q_spans: Vec<Span>,
    pub kv_spans: Vec<Span>,
    pub kv_group: Vec<usize>,
    pub causal: bool,
}

impl AttentionSpec {
    /// Offsets of each query group's probability block (`heads * q_len * k_len` entries).
    fn prob_offsets(&self) -> (Vec<usize>, usize) {
        let mut off = Vec::with_capacity(self.q_spans.len());
        let mut total = 0;
        for (qs, &kg) in self.q_spans.iter().zip(&self.kv_group) {
            off.push(total);
            total += self.n_heads * qs.len * self.kv_spans[kg].len;
        }
        (off, total)
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Transpose(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Clamp(..) => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(..) => "sum_all",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Relu(x)
            | Op::Clamp(x, ..)
            | Op::SumAll(x)
            | Op::Transpose(x)
            | Op::Reshape(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Persistent gradient for leaves, accumulated by every backward pass.
    grad: Option<Vec<f64>>,
}

/// Reverse-mode autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c = a · b` for row-major slices with arbitrary strides via `dgemm`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every (row, col) addressed by the
    // given strides lies inside the corresponding slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided view of a matrix inside a flat buffer: offset, row stride, column stride.
#[derive(Clone, Copy)]
struct View(usize, usize, usize);

impl View {
    fn check(self, buf: usize, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            assert!(self.0 + (rows - 1) * self.1 + (cols - 1) * self.2 < buf);
        }
    }
}

/// `c = alpha * a b + beta * c` for `a: m x k`, `b: k x n` addressed through views.
#[allow(clippy::too_many_arguments)]
fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    beta: f64,
    c: &mut [f64],
    vc: View,
) {
    va.check(a.len(), m, k);
    vb.check(b.len(), k, n);
    vc.check(c.len(), m, n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the checks above keep every addressed element inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.0),
            va.1 as isize,
            va.2 as isize,
            b.as_ptr().add(vb.0),
            vb.1 as isize,
            vb.2 as isize,
            beta,
            c.as_mut_ptr().add(vc.0),
            vc.1 as isize,
            vc.2 as isize,
        );
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Operation tag of a node (`"leaf"`, `"matmul"`, ...).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Operands recorded for a node.
    pub fn operands(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// `b` must match `a`, be a single element, or match a suffix of `a`'s shape.
    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb || self.value(b).numel() == 1 || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        self.check_broadcast(name, a, b)?;
        let av = self.value(a);
        let bv = &self.value(b).data;
        let m = bv.len();
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % m]))
            .collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push(value, mk(a, b)))
    }

    /// Elementwise sum; `b` may be a scalar or match a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a * c).collect(),
        };
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a + c).collect(),
        };
        self.push(value, Op::AddScalar(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        self.push(value, op)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    /// Clamp to `[lo, hi]`; the gradient passes through only inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |a| a.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).rows_cols("matmul")?;
        let (k2, n) = self.value(b).rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
        ))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(invalid(
                op,
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(&v.shape, axis);
        let mut out = vec![0.0; v.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len)
                    .map(|j| v.data[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (v.data[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data: out,
        };
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// `log Σ exp` along `axis` (axis removed), max-shifted for stability.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", x, axis)?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(&v.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len)
                    .map(|j| v.data[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..len).map(|j| (v.data[at(j)] - max).exp()).sum();
                out[o * inner + i] = max + sum.ln();
            }
        }
        let value = Tensor {
            shape: removed_axis(&v.shape, axis),
            data: out,
        };
        Ok(self.push(value, Op::LogSumExp { x, axis }))
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let d = *v
            .shape
            .last()
            .ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: v.shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = v.data.len() / d;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![0.0; v.data.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.data.len()];
        for r in 0..rows {
            let row = &v.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data: out,
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Embedding lookup: rows `ids` of a 2-D `table`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).rows_cols("gather")?;
        if ids.is_empty() {
            return Err(invalid("gather", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of range for {vocab} rows"),
            ));
        }
        let t = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = &self.value(v).data;
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor { shape, data: out };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(&v.shape, axis);
        if start >= end || end > len {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} invalid for axis of length {len}"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&v.data[base + start * inner..base + end * inner]);
        }
        let mut shape = v.shape.clone();
        shape[axis] = w;
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    fn reduce(&self, x: Var, axis: usize) -> (Vec<usize>, Vec<f64>, usize) {
        let v = self.value(x);
        let (outer, len, inner) = axis_split(&v.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &v.data[o * len * inner + j * inner..o * len * inner + (j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        (removed_axis(&v.shape, axis), out, len)
    }

    /// Sum along `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let (shape, data, _) = self.reduce(x, axis);
        Ok(self.push(Tensor { shape, data }, Op::Sum { x, axis }))
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let (shape, mut data, len) = self.reduce(x, axis);
        data.iter_mut().for_each(|a| *a /= len as f64);
        Ok(self.push(Tensor { shape, data }, Op::Mean { x, axis }))
    }

    /// Sum of every element, as a scalar of shape `[]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols("transpose")?;
        let src = &self.value(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(x),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n: usize = shape.iter().product();
        if n != v.data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Multi-head attention over pre-projected `q`, `k`, `v` (see [`AttentionSpec`]).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = self.value(q).rows_cols("attention")?;
        let (kr, dk) = self.value(k).rows_cols("attention")?;
        if self.shape(v) != [kr, dk] || dk != d {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(k).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        if spec.n_heads == 0 || d % spec.n_heads != 0 {
            return Err(invalid(
                "attention",
                format!("{d} not divisible by {} heads", spec.n_heads),
            ));
        }
        if spec.q_spans.len() != spec.kv_group.len() {
            return Err(invalid(
                "attention",
                "one key group per query group required",
            ));
        }
        if spec.q_spans.iter().any(|s| s.end() > qr)
            || spec.kv_spans.iter().any(|s| s.len == 0 || s.end() > kr)
            || spec.kv_group.iter().any(|&g| g >= spec.kv_spans.len())
        {
            return Err(invalid(
                "attention",
                "span outside operand rows or empty key group",
            ));
        }
        let h = spec.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = &self.value(q).data;
        let kd = &self.value(k).data;
        let vd = &self.value(v).data;
        let (offsets, total) = spec.prob_offsets();
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; qr * d];
        for (g, (qs, &kg)) in spec.q_spans.iter().zip(&spec.kv_group).enumerate() {
            let ks = spec.kv_spans[kg];
            let (tq, tk) = (qs.len, ks.len);
            for head in 0..h {
                let qb = qs.start * d + head * dh;
                let kb = ks.start * d + head * dh;
                let pb = offsets[g] + head * tq * tk;
                gemm_view(
                    tq,
                    dh,
                    tk,
                    scale,
                    qd,
                    View(qb, d, 1),
                    kd,
                    View(kb, 1, d),
                    0.0,
                    &mut probs,
                    View(pb, tk, 1),
                );
                for t in 0..tq {
                    let limit = if spec.causal { tk.min(t + 1) } else { tk };
                    let p = &mut probs[pb + t * tk..pb + (t + 1) * tk];
                    let max = p[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for ps in &mut p[..limit] {
                        *ps = (*ps - max).exp();
                        sum += *ps;
                    }
                    p[..limit].iter_mut().for_each(|x| *x /= sum);
                    p[limit..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm_view(
                    tq,
                    tk,
                    dh,
                    1.0,
                    &probs,
                    View(pb, tk, 1),
                    vd,
                    View(kb, d, 1),
                    0.0,
                    &mut out,
                    View(qb, d, 1),
                );
            }
        }
        let value = Tensor {
            shape: vec![qr, d],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        ))
    }

    /// Weighted token cross-entropy: `Σ_i w_i · (logsumexp(logits_i) − logits_i[t_i])`.
    ///
    /// Rows with zero weight are skipped entirely.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (n, vocab) = self.value(logits).rows_cols("cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(invalid(
                "cross_entropy",
                format!(
                    "{n} rows but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(invalid(
                "cross_entropy",
                format!("target {bad} out of range for {vocab}"),
            ));
        }
        let l = &self.value(logits).data;
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &l[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            let mut sum = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                sum += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= sum);
            total += weights[i] * (max + sum.ln() - row[targets[i]]);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Backpropagate from a single-element `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 || self.shape(loss).len() > 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                add_owned(&mut self.nodes[i].grad, gout);
                continue;
            }
            self.backward_node(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value.data;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gout, false, &bv.data, true, &mut da, 0.0);
                    add_owned(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &av.data, true, gout, false, &mut db, 0.0);
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*a) {
                    add_into(&mut grads[a.0], gout);
                }
                if self.needs(*b) {
                    let m = self.value(*b).numel();
                    if m == gout.len() && sign > 0.0 {
                        add_into(&mut grads[b.0], gout);
                    } else {
                        let mut db = vec![0.0; m];
                        for chunk in gout.chunks(m) {
                            db.iter_mut().zip(chunk).for_each(|(d, g)| *d += sign * g);
                        }
                        add_owned(&mut grads[b.0], db);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                let m = bv.len();
                if self.needs(*a) {
                    let da = gout
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * bv[j % m])
                        .collect();
                    add_owned(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; m];
                    for (j, g) in gout.iter().enumerate() {
                        db[j % m] += g * av[j];
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.value(*b).data;
                let m = bv.len();
                if self.needs(*a) {
                    let da = gout
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g / bv[j % m])
                        .collect();
                    add_owned(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let mut db = vec![0.0; m];
                    for (j, g) in gout.iter().enumerate() {
                        db[j % m] -= g * out[j] / bv[j % m];
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Scale(x, c) => {
                add_owned(&mut grads[x.0], gout.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(x) => add_into(&mut grads[x.0], gout),
            Op::Exp(x) => {
                add_owned(
                    &mut grads[x.0],
                    gout.iter().zip(out).map(|(g, y)| g * y).collect(),
                );
            }
            Op::Log(x) => {
                let xv = &self.value(*x).data;
                add_owned(
                    &mut grads[x.0],
                    gout.iter().zip(xv).map(|(g, a)| g / a).collect(),
                );
            }
            Op::Sqrt(x) => {
                add_owned(
                    &mut grads[x.0],
                    gout.iter().zip(out).map(|(g, y)| g * 0.5 / y).collect(),
                );
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                add_owned(
                    &mut grads[x.0],
                    gout.iter()
                        .zip(xv)
                        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &self.value(*x).data;
                add_owned(
                    &mut grads[x.0],
                    gout.iter()
                        .zip(xv)
                        .map(|(g, a)| if a > lo && a < hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.value.shape, *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: f64 = (0..len).map(|j| gout[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = out[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::LogSumExp { x, axis } => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_split(&xv.shape, *axis);
                let mut dx = vec![0.0; xv.data.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let lse = out[o * inner + ii];
                        let g = gout[o * inner + ii];
                        for j in 0..len {
                            let at = o * len * inner + j * inner + ii;
                            dx[at] = g * (xv.data[at] - lse).exp();
                        }
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let rows = xhat.len() / d;
                let g = &self.value(*gain).data;
                if self.needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                    add_owned(&mut grads[gain.0], dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += gout[r * d + j];
                        }
                    }
                    add_owned(&mut grads[bias.0], db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..d).map(|j| gout[r * d + j] * g[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx =
                            (0..d).map(|j| gh[j] * xhat[r * d + j]).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] =
                                inv_std[r] * (gh[j] - mean_gh - xhat[r * d + j] * mean_ghx);
                        }
                    }
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape[1];
                let slot = &mut grads[table.0];
                if slot.is_none() {
                    *slot = Some(vec![0.0; tv.data.len()]);
                }
                let dt = slot.as_mut().expect("initialized above");
                for (r, &id) in ids.iter().enumerate() {
                    let src = &gout[r * d..(r + 1) * d];
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(&node.value.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.needs(*v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dv.extend_from_slice(&gout[base..base + len * inner]);
                        }
                        add_owned(&mut grads[v.0], dv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = axis_split(xs, *axis);
                let w = node.value.shape[*axis];
                let slot = &mut grads[x.0];
                if slot.is_none() {
                    *slot = Some(vec![0.0; outer * len * inner]);
                }
                let dx = slot.as_mut().expect("initialized above");
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    let src = o * w * inner;
                    dx[dst..dst + w * inner]
                        .iter_mut()
                        .zip(&gout[src..src + w * inner])
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = axis_split(xs, *axis);
                let f = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for ii in 0..inner {
                            dx[o * len * inner + j * inner + ii] = gout[o * inner + ii] * f;
                        }
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                add_owned(&mut grads[x.0], vec![gout[0]; n]);
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        dx[i2 * c + j] = gout[j * r + i2];
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], gout),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, gout, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = self.shape(*logits)[1];
                let mut dl = vec![0.0; probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = gout[0] * w;
                    for j in 0..vocab {
                        dl[r * vocab + j] = s * probs[r * vocab + j];
                    }
                    dl[r * vocab + t] -= s;
                }
                add_owned(&mut grads[logits.0], dl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[1];
        let h = spec.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = &self.value(q).data;
        let kd = &self.value(k).data;
        let vd = &self.value(v).data;
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let (offsets, _) = spec.prob_offsets();
        let mut ds = Vec::new();
        for (g, (qs, &kg)) in spec.q_spans.iter().zip(&spec.kv_group).enumerate() {
            let ks = spec.kv_spans[kg];
            let (tq, tk) = (qs.len, ks.len);
            ds.resize(tq * tk, 0.0);
            for head in 0..h {
                let qb = qs.start * d + head * dh;
                let kb = ks.start * d + head * dh;
                let pb = offsets[g] + head * tq * tk;
                // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) * scale
                gemm_view(
                    tq,
                    dh,
                    tk,
                    1.0,
                    gout,
                    View(qb, d, 1),
                    vd,
                    View(kb, 1, d),
                    0.0,
                    &mut ds,
                    View(0, tk, 1),
                );
                gemm_view(
                    tk,
                    tq,
                    dh,
                    1.0,
                    probs,
                    View(pb, 1, tk),
                    gout,
                    View(qb, d, 1),
                    1.0,
                    &mut dv,
                    View(kb, d, 1),
                );
                for t in 0..tq {
                    let p = &probs[pb + t * tk..pb + (t + 1) * tk];
                    let row = &mut ds[t * tk..(t + 1) * tk];
                    let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                    row.iter_mut()
                        .zip(p)
                        .for_each(|(x, &pp)| *x = pp * (*x - dot) * scale);
                }
                gemm_view(
                    tq,
                    tk,
                    dh,
                    1.0,
                    &ds,
                    View(0, tk, 1),
                    kd,
                    View(kb, d, 1),
                    1.0,
                    &mut dq,
                    View(qb, d, 1),
                );
                gemm_view(
                    tk,
                    tq,
                    dh,
                    1.0,
                    &ds,
                    View(0, 1, tk),
                    qd,
                    View(qb, d, 1),
                    1.0,
                    &mut dk,
                    View(kb, d, 1),
                );
            }
        }
        if self.needs(q) {
            add_owned(&mut grads[q.0], dq);
        }
        if self.needs(k) {
            add_owned(&mut grads[k.0], dk);
        }
        if self.needs(v) {
            add_owned(&mut grads[v.0], dv);
        }
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Vec<f64>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let grad = vec![0.0; tensor.numel()];
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor, grad });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add the leaf gradients recorded in `graph` for the bound parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph, binder: &Binder) {
        for (id, var) in binder.bound() {
            if let Some(g) = &graph.nodes[var.0].grad {
                self.params[id]
                    .grad
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Lazily binds store parameters as graph leaves, once per graph.
#[derive(Debug)]
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    /// Binder whose parameters become differentiable leaves.
    pub fn new(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Binder whose parameters become constants (inference only).
    pub fn frozen(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
            trainable: false,
        }
    }

    pub fn get(&mut self, g: &mut Graph, store: &ParamStore, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let t = store.params[id].tensor.clone();
        let v = if self.trainable {
            g.leaf(t)
        } else {
            g.constant(t)
        };
        self.vars[id] = Some(v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `f` builds the scalar loss on a fresh graph, binding parameters through the
/// supplied [`Binder`]. Returns the maximum over every parameter entry of
/// `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn finite_difference_check<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &mut Binder, &ParamStore) -> Result<Var>,
{
    if !(h > 0.0 && h < 1e-2) {
        return Err(invalid(
            "finite_difference_check",
            format!("step {h} outside (0, 1e-2)"),
        ));
    }
    let eval = |store: &ParamStore, f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(store);
        let loss = f(&mut g, &mut b, store)?;
        Ok(g.value(loss).item())
    };
    let base1 = eval(store, &mut f)?;
    let base2 = eval(store, &mut f)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(TensorError::Nondeterministic(base1, base2));
    }

    store.zero_grad();
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let loss = f(&mut g, &mut b, store)?;
    g.backward(loss)?;
    store.accumulate_grads(&g, &b);

    let mut worst: f64 = 0.0;
    for id in 0..store.len() {
        for j in 0..store.get(id).tensor.numel() {
            let orig = store.get(id).tensor.data[j];
            store.get_mut(id).tensor.data[j] = orig + h;
            let up = eval(store, &mut f)?;
            store.get_mut(id).tensor.data[j] = orig - h;
            let down = eval(store, &mut f)?;
            store.get_mut(id).tensor.data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = store.get(id).grad[j];
            let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
