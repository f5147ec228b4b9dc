//! Append-only operation tape with reverse-mode differentiation.
//!
//! Every op evaluates eagerly, stores its output on the tape, and records
//! what backward needs. Nodes are pushed after their inputs, so walking the
//! tape in reverse index order is a valid topological traversal.

use super::kernels::{self, ConvGeom};
use super::tensor::{check_finite, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Relu,
    Square,
    Sqrt,
    Log,
    Exp,
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Sum {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        mean: bool,
    },
    SumAll(Var),
    L2Norm(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Softmax {
        x: Var,
        temperature: f64,
        width: usize,
    },
    Sparsemax {
        x: Var,
        width: usize,
    },
    LogSumExp {
        x: Var,
        width: usize,
    },
    Concat(Vec<Var>),
    IndexSelect {
        x: Var,
        indices: Vec<usize>,
        row: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf; it participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), true)
    }

    /// Records a non-differentiable leaf, taking ownership of its buffer.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push_leaf(shape, tensor.into_data(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Binary(_, a, b) | Op::MatMul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Conv1d { x, kernel, .. } => self.rg(*x) || self.rg(*kernel),
            Op::Unary(_, x)
            | Op::Sum { x, .. }
            | Op::SumAll(x)
            | Op::L2Norm(x)
            | Op::Transpose { x, .. }
            | Op::Reshape(x)
            | Op::Softmax { x, .. }
            | Op::Sparsemax { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::IndexSelect { x, .. } => self.rg(*x),
            Op::Concat(parts) => parts.iter().any(|p| self.rg(*p)),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::from_parts_unchecked(node.shape.clone(), node.data.clone())
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let data = self.value(v);
        if data.len() == 1 {
            Ok(data[0])
        } else {
            Err(Error::shape("scalar", format!("{:?} is not a scalar", self.shape(v))))
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of the last `backward` call, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ----- elementwise -----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape("elementwise", format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (da, db) = (self.value(a), self.value(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![0.0; numel(&out)];
            let stra = kernels::broadcast_strides(&sa, &out);
            let strb = kernels::broadcast_strides(&sb, &out);
            kernels::for_each_broadcast(&out, &stra, &strb, |o, ia, ib| {
                data[o] = f(da[ia], db[ib]);
            });
            data
        };
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        self.push(name, out, data, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let f = |v: f64| match kind {
            Unary::Neg => -v,
            Unary::Relu => v.max(0.0),
            Unary::Square => v * v,
            Unary::Sqrt => v.sqrt(),
            Unary::Log => v.ln(),
            Unary::Exp => v.exp(),
            Unary::Scale(c) => v * c,
            Unary::AddScalar(c) => v + c,
            Unary::ClampMin(c) => v.max(c),
        };
        let name = match kind {
            Unary::Neg => "neg",
            Unary::Relu => "relu",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::ClampMin(_) => "clamp_min",
        };
        if matches!(kind, Unary::Sqrt | Unary::Log) {
            let bad = self.value(x).iter().any(|&v| if matches!(kind, Unary::Log) { v <= 0.0 } else { v < 0.0 });
            if bad {
                return Err(Error::NonFinite(format!("{name} of out-of-domain input")));
            }
        }
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, data, Op::Unary(kind, x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    /// `max(x, floor)` elementwise; gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(Unary::ClampMin(floor), x)
    }

    // ----- reductions ------------------------------------------------------

    fn reduce(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xs[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let op = Op::Sum {
            x,
            outer,
            n,
            inner,
            mean,
        };
        self.push(if mean { "mean" } else { "sum" }, out_shape, data, op)
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().sum();
        self.push("sum_all", Vec::new(), vec![total], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm over every element, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let norm = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push("l2_norm", Vec::new(), vec![norm], Op::L2Norm(x))
    }

    // ----- linear algebra & shape -----------------------------------------

    /// Matrix product.
    ///
    /// Accepts `[M,K]·[K,N]`, batched `[B,M,K]·[B,K,N]`, and `[...,M,K]·[K,N]`
    /// where the right operand is shared across all leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape("matmul", format!("{sa:?} · {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            let n = sb[1];
            let m: usize = sa[..sa.len() - 1].iter().product();
            let mut data = vec![0.0; m * n];
            kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut data, false);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let op = Op::MatMul {
                a,
                b,
                batch: 1,
                m,
                k,
                n,
            };
            return self.push("matmul", shape, data, op);
        }
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sb[1] != k {
            return Err(mismatch());
        }
        let (batch, m, n) = (sa[0], sa[1], sb[2]);
        let mut data = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..],
                    false,
                    &vb[i * k * n..],
                    false,
                    &mut data[i * m * n..],
                    false,
                );
            }
        }
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
        };
        self.push("matmul", vec![batch, m, n], data, op)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("rank of {shape:?} below 2")));
        }
        let rows = shape[shape.len() - 2];
        let cols = shape[shape.len() - 1];
        let batch = numel(&shape) / (rows * cols);
        let xs = self.value(x);
        let mut data = vec![0.0; xs.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    data[base + c * rows + r] = xs[base + r * cols + c];
                }
            }
        }
        let mut out = shape.clone();
        let rank = out.len();
        out.swap(rank - 1, rank - 2);
        self.push("transpose", out, data, Op::Transpose { x, batch, rows, cols })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x))
    }

    /// "Same"-padded dilated cross-correlation along time.
    ///
    /// `x` is `[T, C_in]` or `[B, T, C_in]`, `kernel` is `[k, C_in, C_out]`
    /// with odd `k`. The output has `ceil(T / stride)` steps; with stride 1
    /// its length equals the input's.
    pub fn conv1d(&mut self, x: Var, kernel: Var, dilation: usize, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sk.len() != 3 {
            return Err(Error::shape("conv1d", format!("kernel must be [k, C_in, C_out], got {sk:?}")));
        }
        if sk[0] % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {}", sk[0])));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::Config("conv1d dilation and stride must be positive".into()));
        }
        let (batch, t_in, c_in) = match sx.len() {
            2 => (1, sx[0], sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => return Err(Error::shape("conv1d", format!("input must be [T, C] or [B, T, C], got {sx:?}"))),
        };
        if c_in != sk[1] {
            return Err(Error::shape("conv1d", format!("input channels {c_in} vs kernel {sk:?}")));
        }
        let geom = ConvGeom::new(batch, t_in, c_in, sk[2], sk[0], dilation, stride);
        let cols = kernels::im2col(self.value(x), &geom);
        let data = kernels::conv1d_forward(&cols, self.value(kernel), &geom);
        let shape = if sx.len() == 2 {
            vec![geom.t_out, geom.c_out]
        } else {
            vec![batch, geom.t_out, geom.c_out]
        };
        let cols = if self.rg(kernel) { cols } else { Vec::new() };
        self.push("conv1d", shape, data, Op::Conv1d { x, kernel, geom, cols })
    }

    // ----- normalizers -----------------------------------------------------

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("softmax temperature must be positive, got {temperature}")));
        }
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        let xs = self.value(x);
        let mut data = vec![0.0; xs.len()];
        for (src, dst) in xs.chunks(width).zip(data.chunks_mut(width)) {
            kernels::softmax_row(src, temperature, dst);
        }
        self.push("softmax", shape, data, Op::Softmax { x, temperature, width })
    }

    /// Euclidean projection of each last-axis row onto the probability simplex.
    pub fn sparsemax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        let xs = self.value(x);
        let mut data = vec![0.0; xs.len()];
        for (src, dst) in xs.chunks(width).zip(data.chunks_mut(width)) {
            kernels::sparsemax_row(src, dst);
        }
        self.push("sparsemax", shape, data, Op::Sparsemax { x, width })
    }

    /// Stable `log Σ exp` over the last axis, dropping that axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let width = shape.pop().unwrap_or(1);
        let data = self.value(x).chunks(width).map(kernels::logsumexp_row).collect();
        self.push("logsumexp", shape, data, Op::LogSumExp { x, width })
    }

    // ----- gather / scatter ------------------------------------------------

    /// Concatenates along the first axis. Scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let trailing = |s: &[usize]| if s.is_empty() { Vec::new() } else { s[1..].to_vec() };
        let tail = trailing(self.shape(*first));
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if trailing(s) != tail {
                return Err(Error::shape("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            rows += s.first().copied().unwrap_or(1);
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat", shape, data, Op::Concat(parts.to_vec()))
    }

    /// Selects entries along the first axis (repeats allowed).
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || indices.is_empty() {
            return Err(Error::shape("index_select", "needs a non-scalar input and at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::shape("index_select", format!("index {bad} out of range {}", shape[0])));
        }
        let row: usize = shape[1..].iter().product();
        let xs = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&xs[i * row..(i + 1) * row]);
        }
        let mut out = shape.clone();
        out[0] = indices.len();
        let op = Op::IndexSelect {
            x,
            indices: indices.to_vec(),
            row,
        };
        self.push("index_select", out, data, op)
    }

    // ----- backward --------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every ancestor that
    /// requires them. Calling it twice without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran on this tape; reset gradients first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Inputs always precede node `i`, so splitting at `i` separates the
        // node being processed from everything it reads or writes.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let grads = &mut self.grads[..i];
        let input = |v: Var| &before[v.0];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (na, nb) = (input(*a), input(*b));
                let same = na.shape == nb.shape && na.shape == node.shape;
                let (sa, sb) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (
                        kernels::broadcast_strides(&na.shape, &node.shape),
                        kernels::broadcast_strides(&nb.shape, &node.shape),
                    )
                };
                let (va, vb) = (&na.data, &nb.data);
                let da = |o: usize, _ia: usize, ib: usize| match kind {
                    Binary::Add | Binary::Sub => g[o],
                    Binary::Mul => g[o] * vb[ib],
                    Binary::Div => g[o] / vb[ib],
                };
                let db = |o: usize, ia: usize, ib: usize| match kind {
                    Binary::Add => g[o],
                    Binary::Sub => -g[o],
                    Binary::Mul => g[o] * va[ia],
                    Binary::Div => -g[o] * va[ia] / (vb[ib] * vb[ib]),
                };
                if let Some(ga) = grad_slot(before, grads, *a) {
                    if same {
                        (0..g.len()).for_each(|o| ga[o] += da(o, o, o));
                    } else {
                        kernels::for_each_broadcast(&node.shape, &sa, &sb, |o, ia, ib| ga[ia] += da(o, ia, ib));
                    }
                }
                if let Some(gb) = grad_slot(before, grads, *b) {
                    if same {
                        (0..g.len()).for_each(|o| gb[o] += db(o, o, o));
                    } else {
                        kernels::for_each_broadcast(&node.shape, &sa, &sb, |o, ia, ib| gb[ib] += db(o, ia, ib));
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xs = &input(*x).data;
                let ys = &node.data;
                if let Some(gx) = grad_slot(before, grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += match kind {
                            Unary::Neg => -g[j],
                            Unary::Relu => if xs[j] > 0.0 { g[j] } else { 0.0 },
                            Unary::Square => 2.0 * xs[j] * g[j],
                            Unary::Sqrt => if ys[j] > 0.0 { g[j] / (2.0 * ys[j]) } else { 0.0 },
                            Unary::Log => g[j] / xs[j],
                            Unary::Exp => g[j] * ys[j],
                            Unary::Scale(c) => c * g[j],
                            Unary::AddScalar(_) => g[j],
                            Unary::ClampMin(c) => if xs[j] > *c { g[j] } else { 0.0 },
                        };
                    }
                }
            }
            Op::Sum { x, outer, n, inner, mean } => {
                let scale = if *mean { 1.0 / *n as f64 } else { 1.0 };
                if let Some(gx) = grad_slot(before, grads, *x) {
                    for o in 0..*outer {
                        for j in 0..*n {
                            for k in 0..*inner {
                                gx[(o * n + j) * inner + k] += scale * g[o * inner + k];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = grad_slot(before, grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::L2Norm(x) => {
                let norm = node.data[0];
                let xs = &input(*x).data;
                if let Some(gx) = grad_slot(before, grads, *x) {
                    if norm > 0.0 {
                        gx.iter_mut().zip(xs).for_each(|(d, &v)| *d += g[0] * v / norm);
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (&input(*a).data, &input(*b).data);
                if let Some(ga) = grad_slot(before, grads, *a) {
                    for bi in 0..*batch {
                        // dA = G · Bᵀ
                        kernels::gemm(m, n, k, &g[bi * m * n..], false, &vb[bi * k * n..], true, &mut ga[bi * m * k..], true);
                    }
                }
                if let Some(gb) = grad_slot(before, grads, *b) {
                    for bi in 0..*batch {
                        // dB = Aᵀ · G
                        kernels::gemm(k, m, n, &va[bi * m * k..], true, &g[bi * m * n..], false, &mut gb[bi * k * n..], true);
                    }
                }
            }
            Op::Transpose { x, batch, rows, cols } => {
                if let Some(gx) = grad_slot(before, grads, *x) {
                    for b in 0..*batch {
                        let base = b * rows * cols;
                        for r in 0..*rows {
                            for c in 0..*cols {
                                gx[base + r * cols + c] += g[base + c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_slot(before, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Conv1d { x, kernel, geom, cols } => {
                let width = geom.kernel * geom.c_in;
                let rows = geom.batch * geom.t_out;
                let kv = &input(*kernel).data;
                if let Some(gk) = grad_slot(before, grads, *kernel) {
                    // dW = colsᵀ · G
                    kernels::gemm(width, rows, geom.c_out, cols, true, g, false, gk, true);
                }
                if let Some(gx) = grad_slot(before, grads, *x) {
                    // dcols = G · Wᵀ
                    let mut dcols = vec![0.0; rows * width];
                    kernels::gemm(rows, geom.c_out, width, g, false, kv, true, &mut dcols, false);
                    kernels::col2im(&dcols, geom, gx);
                }
            }
            Op::Softmax { x, temperature, width } => {
                let ys = &node.data;
                if let Some(gx) = grad_slot(before, grads, *x) {
                    for ((gr, yr), dst) in g.chunks(*width).zip(ys.chunks(*width)).zip(gx.chunks_mut(*width)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..*width {
                            dst[j] += yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                }
            }
            Op::Sparsemax { x, width } => {
                let ys = &node.data;
                if let Some(gx) = grad_slot(before, grads, *x) {
                    for ((gr, yr), dst) in g.chunks(*width).zip(ys.chunks(*width)).zip(gx.chunks_mut(*width)) {
                        let (mut total, mut count) = (0.0, 0usize);
                        for j in 0..*width {
                            if yr[j] > 0.0 {
                                total += gr[j];
                                count += 1;
                            }
                        }
                        let mean = total / count.max(1) as f64;
                        for j in 0..*width {
                            if yr[j] > 0.0 {
                                dst[j] += gr[j] - mean;
                            }
                        }
                    }
                }
            }
            Op::LogSumExp { x, width } => {
                let xs = &input(*x).data;
                let lse = &node.data;
                if let Some(gx) = grad_slot(before, grads, *x) {
                    for (r, (src, dst)) in xs.chunks(*width).zip(gx.chunks_mut(*width)).enumerate() {
                        for j in 0..*width {
                            dst[j] += g[r] * (src[j] - lse[r]).exp();
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = input(p).data.len();
                    if let Some(gp) = grad_slot(before, grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::IndexSelect { x, indices, row } => {
                if let Some(gx) = grad_slot(before, grads, *x) {
                    for (r, &i) in indices.iter().enumerate() {
                        for k in 0..*row {
                            gx[i * row + k] += g[r * row + k];
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}
