//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its value and the information its
//! backward rule needs. Nodes are appended after their inputs, so walking the
//! tape backwards is a valid topological order. Parameters are read straight
//! from the borrowed [`ParamStore`] and never copied onto the tape.

use super::params::{Gradients, ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor added inside the logarithm of [`Tape::nll`].
pub const NLL_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulColumn(Var, Var),
    Affine(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        b_shared: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sigmoid(Var),
    Relu(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Nll {
        dist: Var,
        targets: Vec<usize>,
    },
    OuterAdd {
        a: Var,
        b: Var,
    },
    ScatterCols {
        input: Var,
        ids: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::MulColumn(..) => "mul_column",
            Op::Affine(..) => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax { .. } => "softmax_masked",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Nll { .. } => "nll",
            Op::OuterAdd { .. } => "outer_add",
            Op::ScatterCols { .. } => "scatter_cols",
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// `shape` split around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `C = beta * C + op(A) * op(B)` with `op(A)` of size m x k and `op(B)` of size k x n.
/// A transposed operand is stored as its transpose in row-major order.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major buffers whose lengths are asserted above.
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

/// Records one forward pass for later differentiation.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
    dropout_rng: Option<Rng>,
    track_params: bool,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape with no parameter store, for free-standing computations.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grads: Vec::new(),
            dropout_rng: None,
            track_params: false,
        }
    }
}

impl<'p> Tape<'p> {
    /// A tape reading parameters from `params`; parameter gradients are
    /// tracked when `track_params` is set.
    pub fn with_params(params: &'p ParamStore, track_params: bool) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grads: Vec::new(),
            dropout_rng: None,
            track_params,
        }
    }

    /// Enables dropout, drawing masks from `rng`. Without this, dropout is the identity.
    pub fn enable_dropout(&mut self, rng: Rng) {
        self.dropout_rng = Some(rng);
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("param node without a store")
                .get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::Param(_) => false,
            Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MulColumn(a, b)
            | Op::MatMul { a, b, .. }
            | Op::OuterAdd { a, b } => self.requires(*a) || self.requires(*b),
            Op::Affine(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a) => self.requires(*a),
            Op::Slice { input, .. }
            | Op::Dropout { input, .. }
            | Op::Softmax { input, .. }
            | Op::ScatterCols { input, .. } => self.requires(*input),
            Op::Gather { table, .. } => self.requires(*table),
            Op::Nll { dist, .. } => self.requires(*dist),
            Op::Concat { inputs, .. } => inputs.iter().any(|v| self.requires(*v)),
            Op::LayerNorm { x, gain, bias, .. } => {
                self.requires(*x) || self.requires(*gain) || self.requires(*bias)
            }
        };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input (gradient is recorded for it).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// The node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ----- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Add(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + bias`, where `bias`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.is_empty() || !x.shape().ends_with(b.shape()) {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", x.shape(), b.shape()),
            ));
        }
        let bl = b.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % bl])
            .collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::AddBias(a, bias))
    }

    /// Scales each row of `a` (last axis) by the matching entry of the column `c` of shape `[rows, 1]`.
    pub fn mul_column(&mut self, a: Var, c: Var) -> Result<Var> {
        let (x, col) = (self.value(a), self.value(c));
        if col.cols() != 1 || col.rows() != x.rows() {
            return Err(Error::shape(
                "mul_column",
                format!("{:?} * {:?}", x.shape(), col.shape()),
            ));
        }
        let cols = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * col.data()[i / cols])
            .collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::MulColumn(a, c))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Relu(a))
    }

    /// Which relu inputs are positive, in tape order. Two evaluations of
    /// the same graph with different patterns lie on different linear
    /// pieces, so a finite difference between them straddles a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    /// Identity when `rate == 0` or dropout is not enabled on this tape.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let n = self.value(a).len();
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Dropout { input: a, mask })
    }

    /// Zeroes whole rows of a 2-D `a` with probability `rate`, without
    /// rescaling. Identity when `rate == 0` or dropout is not enabled.
    pub fn row_dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("row dropout rate {rate}")));
        }
        if rate == 0.0 || self.dropout_rng.is_none() {
            return Ok(a);
        }
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        let rng = self.dropout_rng.as_mut().expect("checked above");
        let mut mask = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let m = if rng.bernoulli(rate) { 0.0 } else { 1.0 };
            mask.extend(std::iter::repeat_n(m, cols));
        }
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::Dropout { input: a, mask })
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    // ----- shape algebra -----------------------------------------------

    /// Matrix product over the last two axes. `b` either has the same
    /// leading (batch) axes as `a` or is a plain matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        let mismatch = || Error::shape("matmul", format!("{xs:?} x {ys:?} (trans_b={trans_b})"));
        if xs.len() < 2 || ys.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (bk, n) = if trans_b {
            (ys[ys.len() - 1], ys[ys.len() - 2])
        } else {
            (ys[ys.len() - 2], ys[ys.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let lead = &xs[..xs.len() - 2];
        let b_shared = ys.len() == 2;
        if !b_shared && &ys[..ys.len() - 2] != lead {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bo = if b_shared { 0 } else { i * k * n };
            gemm(
                m,
                k,
                n,
                &x.data()[i * m * k..],
                false,
                &y.data()[bo..],
                trans_b,
                &mut out[i * m * n..],
                0.0,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.push(
            Tensor::raw(shape, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                b_shared,
                m,
                k,
                n,
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = x.len() / (r * c).max(1);
        let mut out = vec![0.0; x.len()];
        for bi in 0..batch {
            let src = &x.data()[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        self.push(Tensor::raw(shape, out), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", x.shape()),
            ));
        }
        let out = Tensor::raw(shape.to_vec(), x.data().to_vec());
        self.push(out, Op::Reshape(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let x = self.value(*v);
                let chunk = x.shape()[axis] * inner;
                out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::raw(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, len, inner) = axis_extents(s, axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = width;
        self.push(
            Tensor::raw(shape, out),
            Op::Slice {
                input: a,
                axis,
                start,
            },
        )
    }

    /// Row lookup into a `[rows, dim]` table; the gradient scatter-adds back into the table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather", format!("table {:?}", t.shape())));
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        self.push(
            Tensor::raw(vec![ids.len(), dim], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ----- normalization and probability ------------------------------

    /// Softmax along `axis`. Masked-out entries (`false`) get probability
    /// exactly 0. The mask is either `x`'s full size or the size of a trailing
    /// suffix of its shape, repeated over the leading axes.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if axis >= s.len() {
            return Err(Error::shape("softmax_masked", format!("axis {axis} of {s:?}")));
        }
        if let Some(mask) = mask {
            if mask.is_empty() || x.len() % mask.len() != 0 {
                return Err(Error::shape(
                    "softmax_masked",
                    format!("mask of {} for {s:?}", mask.len()),
                ));
            }
        }
        let (outer, len, inner) = axis_extents(s, axis);
        let mut out = vec![0.0; x.len()];
        let data = x.data();
        let keep = |i: usize| mask.is_none_or(|m| m[i % m.len()]);
        for o in 0..outer {
            for j in 0..inner {
                let idx = |t: usize| o * len * inner + t * inner + j;
                let mut max = f64::NEG_INFINITY;
                for t in 0..len {
                    if keep(idx(t)) {
                        max = max.max(data[idx(t)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::InvalidArgument(
                        "softmax_masked: fully masked slice".into(),
                    ));
                }
                let mut total = 0.0;
                for t in 0..len {
                    if keep(idx(t)) {
                        let e = (data[idx(t)] - max).exp();
                        out[idx(t)] = e;
                        total += e;
                    }
                }
                for t in 0..len {
                    out[idx(t)] /= total;
                }
            }
        }
        let out = Tensor::raw(s.to_vec(), out);
        self.push(out, Op::Softmax { input: a, axis })
    }

    /// Normalizes over the last axis to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps {eps}")));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if g.len() != d || b.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?} bias {:?}", xv.shape(), g.shape(), b.shape()),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = g.data()[c] * h + b.data()[c];
            }
        }
        let out = Tensor::raw(xv.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Summed negative log-likelihood `-ln(p[target] + NLL_FLOOR)` of one
    /// target per row of an already-normalized distribution.
    pub fn nll(&mut self, dist: Var, targets: &[usize]) -> Result<Var> {
        let p = self.value(dist);
        let (rows, v) = (p.rows(), p.cols());
        if rows != targets.len() {
            return Err(Error::shape(
                "nll",
                format!("{rows} rows for {} targets", targets.len()),
            ));
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: t,
                    len: v,
                });
            }
            let row = p.row(r);
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "nll: row {r} sums to {total}, not 1"
                )));
            }
            loss -= (row[t] + NLL_FLOOR).ln();
        }
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                dist,
                targets: targets.to_vec(),
            },
        )
    }

    /// Pairwise sum: `a` of shape `[t, h]` and `b` of shape `[s, h]` give
    /// `out[i, j, :] = a[i, :] + b[j, :]` of shape `[t, s, h]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
            return Err(Error::shape(
                "outer_add",
                format!("{:?} (+) {:?}", x.shape(), y.shape()),
            ));
        }
        let (t, s, h) = (x.rows(), y.rows(), x.cols());
        let mut out = Vec::with_capacity(t * s * h);
        for i in 0..t {
            let xr = x.row(i);
            for j in 0..s {
                out.extend(xr.iter().zip(y.row(j)).map(|(p, q)| p + q));
            }
        }
        self.push(Tensor::raw(vec![t, s, h], out), Op::OuterAdd { a, b })
    }

    /// Scatter-adds columns: `out[r, ids[s]] += input[r, s]`, giving shape `[rows, width]`.
    pub fn scatter_cols(&mut self, input: Var, ids: &[usize], width: usize) -> Result<Var> {
        let x = self.value(input);
        if x.cols() != ids.len() {
            return Err(Error::shape(
                "scatter_cols",
                format!("{:?} with {} ids", x.shape(), ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= width) {
            return Err(Error::OutOfRange {
                what: "scatter width",
                index: bad,
                len: width,
            });
        }
        let rows = x.rows();
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for (s, &id) in ids.iter().enumerate() {
                out[r * width + id] += x.data()[r * ids.len() + s];
            }
        }
        self.push(
            Tensor::raw(vec![rows, width], out),
            Op::ScatterCols {
                input,
                ids: ids.to_vec(),
            },
        )
    }

    // ----- backward ----------------------------------------------------

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears all recorded gradients.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Backpropagates from a scalar `loss`. Gradients accumulate across
    /// repeated calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        if !self.requires(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            self.backprop_node(i, &g, &mut pending)?;
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) -> Result<()> {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("{} (backward)", self.nodes[i].op.name()),
            });
        }
        let out = self.nodes[i].value.as_ref();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.value(v).len();
                let slot = pending[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(bv).for_each(|((x, y), w)| *x += y * w)
                });
                acc(*b, &mut |s| {
                    s.iter_mut().zip(g).zip(av).for_each(|((x, y), w)| *x += y * w)
                });
            }
            Op::AddBias(a, bias) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*bias, &mut |s| {
                    let bl = s.len();
                    for (k, y) in g.iter().enumerate() {
                        s[k % bl] += y;
                    }
                });
            }
            Op::MulColumn(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c).data());
                let cols = av.cols();
                acc(*a, &mut |s| {
                    for (k, x) in s.iter_mut().enumerate() {
                        *x += g[k] * cv[k / cols];
                    }
                });
                acc(*c, &mut |s| {
                    for (r, x) in s.iter_mut().enumerate() {
                        let row = &av.data()[r * cols..(r + 1) * cols];
                        *x += row.iter().zip(&g[r * cols..(r + 1) * cols]).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            Op::Affine(a, scale) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += scale * y));
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                b_shared,
                m,
                k,
                n,
            } => {
                let (m, k, n, trans_b) = (*m, *k, *n, *trans_b);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let boff = |bi: usize| if *b_shared { 0 } else { bi * k * n };
                acc(*a, &mut |s| {
                    for bi in 0..*batch {
                        // dA = dC * op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            false,
                            &bv[boff(bi)..],
                            !trans_b,
                            &mut s[bi * m * k..],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for bi in 0..*batch {
                        if trans_b {
                            // d(B stored n x k) = dC^T * A
                            gemm(n, m, k, &g[bi * m * n..], true, &av[bi * m * k..], false, &mut s[boff(bi)..], 1.0);
                        } else {
                            // dB = A^T * dC
                            gemm(k, m, n, &av[bi * m * k..], true, &g[bi * m * n..], false, &mut s[boff(bi)..], 1.0);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s_out = out.unwrap().shape();
                let l = s_out.len();
                // Output is [.., c, r]; input was [.., r, c].
                let (c, r) = (s_out[l - 2], s_out[l - 1]);
                acc(*a, &mut |s| {
                    let batch = s.len() / (r * c).max(1);
                    for bi in 0..batch {
                        let o = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                s[o + i * c + j] += g[o + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Concat { inputs, axis } => {
                let shape = out.unwrap().shape();
                let (outer, total, inner) = axis_extents(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let width = self.shape(*v)[*axis];
                    acc(*v, &mut |s| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * width * inner;
                            for t in 0..width * inner {
                                s[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, len, inner) = axis_extents(in_shape, *axis);
                let width = out.unwrap().shape()[*axis];
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        for t in 0..width * inner {
                            s[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dim = self.shape(*table)[1];
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            s[id * dim + c] += g[r * dim + c];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.unwrap().data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                acc(*input, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * mask[k];
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                acc(*a, &mut |s| {
                    let scale = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|x| *x += scale);
                });
            }
            Op::Softmax { input, axis } => {
                let y = out.unwrap();
                let (outer, len, inner) = axis_extents(y.shape(), *axis);
                let yd = y.data();
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |t: usize| o * len * inner + t * inner + j;
                            let dot: f64 = (0..len).map(|t| g[idx(t)] * yd[idx(t)]).sum();
                            for t in 0..len {
                                s[idx(t)] += yd[idx(t)] * (g[idx(t)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = inv_std.len();
                acc(*gain, &mut |s| {
                    for k in 0..rows * d {
                        s[k % d] += g[k] * xhat[k];
                    }
                });
                acc(*bias, &mut |s| {
                    for k in 0..rows * d {
                        s[k % d] += g[k];
                    }
                });
                acc(*x, &mut |s| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let o = r * d;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = g[o + c] * gv[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xhat[o + c];
                        }
                        let scale = inv_std[r] / d as f64;
                        for c in 0..d {
                            s[o + c] += scale * (d as f64 * dxhat[c] - sum_d - xhat[o + c] * sum_dx);
                        }
                    }
                });
            }
            Op::Nll { dist, targets } => {
                let p = self.value(*dist);
                let v = p.cols();
                acc(*dist, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        s[r * v + t] -= g[0] / (p.data()[r * v + t] + NLL_FLOOR);
                    }
                });
            }
            Op::OuterAdd { a, b } => {
                let (t, h) = (self.shape(*a)[0], self.shape(*a)[1]);
                let sl = self.shape(*b)[0];
                acc(*a, &mut |s| {
                    for i in 0..t {
                        for j in 0..sl {
                            let o = (i * sl + j) * h;
                            for c in 0..h {
                                s[i * h + c] += g[o + c];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..t {
                        for j in 0..sl {
                            let o = (i * sl + j) * h;
                            for c in 0..h {
                                s[j * h + c] += g[o + c];
                            }
                        }
                    }
                });
            }
            Op::ScatterCols { input, ids } => {
                let width = out.unwrap().cols();
                let n = ids.len();
                acc(*input, &mut |s| {
                    let rows = s.len() / n.max(1);
                    for r in 0..rows {
                        for (k, &id) in ids.iter().enumerate() {
                            s[r * n + k] += g[r * width + id];
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Collects the gradients of every parameter used on this tape.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::empty(self.param_vars.len());
        self.add_param_grads_into(&mut out);
        out
    }

    /// Adds this tape's parameter gradients into `out`.
    pub fn add_param_grads_into(&self, out: &mut Gradients) {
        for (idx, var) in self.param_vars.iter().enumerate() {
            if let Some(var) = var {
                if let Some(g) = self.grad(*var) {
                    let slot = out.slot_mut(ParamId(idx), g.len());
                    slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
