//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! operands. [`Tape::backward`] walks the tape in reverse from a scalar root
//! and accumulates adjoints for every node that (transitively) depends on a
//! leaf created with `requires_grad = true`. Branches that depend only on
//! constants are skipped entirely, which is what keeps input-gradient-only
//! attack steps cheap.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The network primitives, for callers that dispatch on an op kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardOp {
    MatMul,
    Conv2d { pad: usize },
    AddBias,
    Relu,
    Flatten,
    LogSoftmax,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, kernel: Var, pad: usize },
    AddBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    LogSoftmax(Var),
    Exp(Var),
    LogFloor(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumRows(Var),
    Pick(Var, Vec<usize>),
    MaxExcept { x: Var, argmax: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `[m,k]`
/// and `b` logically `[k,n]`; `*_t` flags mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the logical dimensions and strides above.
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

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] || kernel[2] != kernel[3] {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let (h, w, k) = (input[2], input[3], kernel[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Ok(ConvGeom {
            n: input[0],
            c: input[1],
            h,
            w,
            o: kernel[0],
            k,
            pad,
            ho: h + 2 * pad - k + 1,
            wo: w + 2 * pad - k + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(col_row, col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let spatial = self.ho * self.wo;
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    for n in 0..self.n {
                        let in_base = (n * self.c + c) * self.h * self.w;
                        for oh in 0..self.ho {
                            let ih = oh + ki;
                            if ih < self.pad || ih - self.pad >= self.h {
                                continue;
                            }
                            let ih = ih - self.pad;
                            for ow in 0..self.wo {
                                let iw = ow + kj;
                                if iw < self.pad || iw - self.pad >= self.w {
                                    continue;
                                }
                                let iw = iw - self.pad;
                                f(r, n * spatial + oh * self.wo + ow, in_base + ih * self.w + iw);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let ncols = self.cols();
        let mut cols = vec![0.0; self.patch() * ncols];
        self.for_each_tap(|r, col, idx| cols[r * ncols + col] = input[idx]);
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let ncols = self.cols();
        self.for_each_tap(|r, col, idx| out[idx] += cols[r * ncols + col]);
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes; existing `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Conv2d { input, kernel, .. } => self.requires_grad(*input) || self.requires_grad(*kernel),
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::LogSoftmax(a)
            | Op::Exp(a)
            | Op::LogFloor(a)
            | Op::Abs(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::Pick(a, _)
            | Op::MaxExcept { x: a, .. } => self.requires_grad(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Dispatch one of the network primitives by kind.
    pub fn forward_op(&mut self, op: ForwardOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ForwardOp::MatMul | ForwardOp::Conv2d { .. } | ForwardOp::AddBias => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Invalid(format!(
                "{op:?} takes {arity} operand(s), got {}",
                inputs.len()
            )));
        }
        match op {
            ForwardOp::MatMul => self.matmul(inputs[0], inputs[1]),
            ForwardOp::Conv2d { pad } => self.conv2d(inputs[0], inputs[1], pad),
            ForwardOp::AddBias => self.add_bias(inputs[0], inputs[1]),
            ForwardOp::Relu => self.relu(inputs[0]),
            ForwardOp::Flatten => self.flatten(inputs[0]),
            ForwardOp::LogSoftmax => self.log_softmax(inputs[0]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), "transpose")
    }

    /// Stride-1 convolution of an NCHW input with an OIHW kernel and symmetric
    /// zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.shape(input), self.shape(kernel), pad)?;
        let cols = g.im2col(self.value(input).data());
        let ncols = g.cols();
        let mut out_mat = vec![0.0; g.o * ncols];
        gemm(g.o, g.patch(), ncols, self.value(kernel).data(), false, &cols, false, &mut out_mat, false);
        let spatial = g.ho * g.wo;
        let mut out = vec![0.0; g.n * g.o * spatial];
        for o in 0..g.o {
            for n in 0..g.n {
                let src = &out_mat[o * ncols + n * spatial..o * ncols + (n + 1) * spatial];
                out[(n * g.o + o) * spatial..(n * g.o + o + 1) * spatial].copy_from_slice(src);
            }
        }
        self.push(
            Tensor::new(vec![g.n, g.o, g.ho, g.wo], out)?,
            Op::Conv2d { input, kernel, pad },
            "conv2d",
        )
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let ch = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % ch];
        }
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), "relu")
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.rows();
        let out = v.clone().reshape(&[n, v.row_len()])?;
        self.push(out, Op::Reshape(x), "flatten")
    }

    /// Row-wise log-softmax of `[N, C]`, stabilized by the row maximum.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::shape("log_softmax", v.shape(), &[]));
        }
        let mut out = v.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for z in row.iter_mut() {
                *z -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(x), "log_softmax")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), "exp")
    }

    /// `ln(max(x, PROB_FLOOR))`.
    pub fn log_floor(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(PROB_FLOOR).ln());
        self.push(out, Op::LogFloor(x), "log")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), "abs")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), "add_scalar")
    }

    /// Sum of all entries, as a shape-`[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `[N, C] -> [N]` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::shape("sum_rows", v.shape(), &[]));
        }
        let out = Tensor::from_vec((0..v.rows()).map(|i| v.row(i).iter().sum()).collect());
        self.push(out, Op::SumRows(x), "sum_rows")
    }

    /// `[N, C] -> [N]`, entry `i` is `x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.rows() != idx.len() {
            return Err(Error::shape("pick", v.shape(), &[idx.len()]));
        }
        let c = v.shape()[1];
        let mut out = Vec::with_capacity(idx.len());
        for (i, &k) in idx.iter().enumerate() {
            if k >= c {
                return Err(Error::Label { label: k, classes: c });
            }
            out.push(v.row(i)[k]);
        }
        self.push(Tensor::from_vec(out), Op::Pick(x, idx.to_vec()), "pick")
    }

    /// `[N, C] -> [N]`, entry `i` is `max_{k != idx[i]} x[i, k]`. Needs `C >= 2`.
    pub fn max_except(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.rows() != idx.len() || v.shape()[1] < 2 {
            return Err(Error::shape("max_except", v.shape(), &[idx.len()]));
        }
        let c = v.shape()[1];
        let mut out = Vec::with_capacity(idx.len());
        let mut argmax = Vec::with_capacity(idx.len());
        for (i, &y) in idx.iter().enumerate() {
            if y >= c {
                return Err(Error::Label { label: y, classes: c });
            }
            let row = v.row(i);
            let mut best = usize::MAX;
            for (k, &z) in row.iter().enumerate() {
                if k != y && (best == usize::MAX || z > row[best]) {
                    best = k;
                }
            }
            out.push(row[best]);
            argmax.push(best);
        }
        self.push(Tensor::from_vec(out), Op::MaxExcept { x, argmax }, "max_except")
    }

    /// Adjoints of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                        accumulate(&mut grads, *a, Tensor::new(vec![m, k], da)?)?;
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, false);
                        accumulate(&mut grads, *b, Tensor::new(vec![k, n], db)?)?;
                    }
                }
                Op::Transpose(a) => {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = g.data()[j * r + i];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![r, c], out)?)?;
                }
                Op::Conv2d { input, kernel, pad } => {
                    let geo = ConvGeom::new(self.shape(*input), self.shape(*kernel), *pad)?;
                    let ncols = geo.cols();
                    let spatial = geo.ho * geo.wo;
                    let mut dout = vec![0.0; geo.o * ncols];
                    for o in 0..geo.o {
                        for n in 0..geo.n {
                            let src = &g.data()[(n * geo.o + o) * spatial..(n * geo.o + o + 1) * spatial];
                            dout[o * ncols + n * spatial..o * ncols + (n + 1) * spatial].copy_from_slice(src);
                        }
                    }
                    if self.requires_grad(*kernel) {
                        let cols = geo.im2col(self.value(*input).data());
                        let mut dk = vec![0.0; geo.o * geo.patch()];
                        gemm(geo.o, ncols, geo.patch(), &dout, false, &cols, true, &mut dk, false);
                        accumulate(&mut grads, *kernel, Tensor::new(self.shape(*kernel).to_vec(), dk)?)?;
                    }
                    if self.requires_grad(*input) {
                        let mut dcols = vec![0.0; geo.patch() * ncols];
                        gemm(
                            geo.patch(),
                            geo.o,
                            ncols,
                            self.value(*kernel).data(),
                            true,
                            &dout,
                            false,
                            &mut dcols,
                            false,
                        );
                        let mut din = vec![0.0; self.value(*input).len()];
                        geo.col2im(&dcols, &mut din);
                        accumulate(&mut grads, *input, Tensor::new(self.shape(*input).to_vec(), din)?)?;
                    }
                }
                Op::AddBias(x, b) => {
                    if self.requires_grad(*b) {
                        let s = self.shape(*x);
                        let ch = s[1];
                        let inner: usize = s[2..].iter().product();
                        let mut db = vec![0.0; ch];
                        for (i, &v) in g.data().iter().enumerate() {
                            db[(i / inner) % ch] += v;
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(db))?;
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Relu(x) => {
                    let dx = g.zip_map(self.value(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Reshape(x) => {
                    let dx = g.reshape(self.shape(*x))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        let yr = y.row(r);
                        for (d, &lv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d -= lv.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Exp(x) => {
                    let dx = g.zip_map(&node.value, "exp", |gv, e| gv * e)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LogFloor(x) => {
                    let dx = g.zip_map(self.value(*x), "log", |gv, xv| if xv > PROB_FLOOR { gv / xv } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Abs(x) => {
                    let dx = g.zip_map(self.value(*x), "abs", |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.requires_grad(*b) {
                        let db = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.scale(*c))?;
                }
                Op::AddScalar(x) => {
                    accumulate(&mut grads, *x, g)?;
                }
                Op::Sum(x) => {
                    let dx = Tensor::full(self.shape(*x), g.data()[0]);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SumRows(x) => {
                    let s = self.shape(*x);
                    let mut dx = Tensor::zeros(s);
                    for r in 0..s[0] {
                        let gv = g.data()[r];
                        dx.row_mut(r).iter_mut().for_each(|d| *d = gv);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Pick(x, idx) => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for (r, &k) in idx.iter().enumerate() {
                        dx.row_mut(r)[k] = g.data()[r];
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::MaxExcept { x, argmax } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for (r, &k) in argmax.iter().enumerate() {
                        dx.row_mut(r)[k] = g.data()[r];
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Compares the tape gradient of a scalar function against central finite
/// differences.
///
/// `f` receives a fresh tape and a leaf holding the evaluation point and must
/// return a scalar node. Returns the largest per-coordinate
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(f: F, at: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone(), true);
    let root = f(&mut tape, x)?;
    let analytic = tape
        .backward(root)?
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(at.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(point, false);
        let r = f(&mut t, x)?;
        let v = t.value(r).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::non_finite("finite-difference evaluation"))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..at.len() {
        let mut plus = at.clone();
        plus.data_mut()[i] += h;
        let mut minus = at.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_piecewise() {
        for (x0, expected) in [(-1.0, 0.0), (2.0, 1.0), (0.0, 0.0)] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::scalar(x0), true);
            let y = tape.relu(x).unwrap();
            let s = tape.sum(y).unwrap();
            let g = tape.backward(s).unwrap();
            assert_eq!(g.get(x).unwrap().data()[0], expected, "x = {x0}");
        }
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let i = tape.constant(eye);
        let av = tape.constant(a.clone());
        let y = tape.forward_op(ForwardOp::MatMul, &[i, av]).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn conv_all_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_padding_keeps_spatial() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 8, 8], 0.5));
        let k = tape.constant(Tensor::full(&[4, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 8, 8]);
        // corner sees 4 taps, interior 9
        assert_eq!(tape.value(y).data()[0], 2.0);
        assert_eq!(tape.value(y).data()[9], 4.5);
    }

    #[test]
    fn shape_errors_name_operands() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn linear_form_gradient() {
        let w = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let wv = tape.constant(w.clone());
        let p = tape.mul(wv, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &w);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1000.0, 1000.0, 1000.0]));
        let y = tape.log_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v + 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_half_squared_norm() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let err = finite_difference_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn fd_constant_function() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = finite_difference_check(
            |t, _x| {
                let c = t.constant(Tensor::scalar(3.0));
                t.sum(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(800.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
    }
}
