//! Reverse-mode differentiation over a per-step recording tape.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is already topologically sorted and the
//! adjoint pass walks it backwards exactly once. A graph supports a single
//! [`Graph::backward`] call; record a fresh graph for every step.

mod kernels;

pub(crate) use kernels::gemm;
use kernels::{col2im, gelu, gelu_grad, im2col, sigmoid, softplus, ConvGeometry};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Recip(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    AddChannel(Var, Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Diag(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Splits a shape into (leading rows, trailing width).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether gradients flow back through `v`.
    pub fn tracks_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Places `t` on the tape, tracking gradients iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that always tracks gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `factor · x + offset`, elementwise.
    pub fn affine(&mut self, x: Var, factor: f64, offset: f64) -> Var {
        self.unary(x, |v| factor * v + offset, Op::Affine(x, factor))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item().map_err(|_| {
            Error::shape("scale_by", format!("factor must be scalar, got {:?}", self.value(s).shape()))
        })?;
        let value = self.value(x).scale(factor);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean over the leading axis of a matrix: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix("mean_rows", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; c];
        for row in d.chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::MeanRows(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix("transpose", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `[m, k] · [n, k]ᵀ -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul_nt", self.value(a))?;
        let (n, k2) = as_matrix("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    /// Affine map over the trailing axis: `x[..., din] · wᵀ + b` with
    /// `w[dout, din]` and `b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (dout, din) = as_matrix("linear", wt)?;
        let xs = xt.shape();
        if *xs.last().unwrap() != din {
            return Err(Error::shape(
                "linear",
                format!("input trailing dimension {} does not match weight input dimension {din}", xs.last().unwrap()),
            ));
        }
        if bt.shape() != [dout] {
            return Err(Error::shape("linear", format!("bias shape {:?}, expected [{dout}]", bt.shape())));
        }
        let rows = xt.numel() / din;
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(bt.data());
        }
        gemm(rows, din, dout, xt.data(), false, wt.data(), true, &mut out, 1.0);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of `x[cin, h, w]` with `kernel[cout, cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        padding: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (xt, kt, bt) = (self.value(x), self.value(kernel), self.value(bias));
        let [cin, h, w] = *xt.shape() else {
            return Err(Error::shape("conv2d", format!("input must be [C, H, W], got {:?}", xt.shape())));
        };
        let [cout, kcin, kh, kw] = *kt.shape() else {
            return Err(Error::shape("conv2d", format!("kernel must be [Cout, Cin, kh, kw], got {:?}", kt.shape())));
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", format!("input channels: input has {cin}, kernel expects {kcin}")));
        }
        if bt.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{cout}]", bt.shape())));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * padding.0 {
            return Err(Error::shape("conv2d", format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding.0)));
        }
        if kw > w + 2 * padding.1 {
            return Err(Error::shape("conv2d", format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding.1)));
        }
        let geo = ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            pad: padding,
            stride,
            oh: (h + 2 * padding.0 - kh) / stride.0 + 1,
            ow: (w + 2 * padding.1 - kw) / stride.1 + 1,
        };
        let cols = im2col(xt.data(), &geo);
        let mut out = Vec::with_capacity(cout * geo.out_len());
        for &bv in bt.data() {
            out.extend(std::iter::repeat_n(bv, geo.out_len()));
        }
        gemm(cout, geo.patch_len(), geo.out_len(), kt.data(), false, &cols, false, &mut out, 1.0);
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        let value = Tensor::from_parts(vec![cout, geo.oh, geo.ow], out);
        Ok(self.push(value, Op::Conv2d { x, w: kernel, b: bias, geo, cols }, rg))
    }

    /// Adds a per-channel offset `v[c]` to every location of `x[c, h, w]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xt, vt) = (self.value(x), self.value(v));
        let c = xt.shape()[0];
        if xt.rank() != 3 || vt.shape() != [c] {
            return Err(Error::shape("add_channel", format!("{:?} + {:?}", xt.shape(), vt.shape())));
        }
        let plane = xt.numel() / c;
        let mut out = xt.data().to_vec();
        for (ch, chunk) in out.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|o| *o += vt.data()[ch]);
        }
        let rg = self.rg(x) || self.rg(v);
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(value, Op::AddChannel(x, v), rg))
    }

    /// Max pooling over `x[c, h, w]`; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let xt = self.value(x);
        let [c, h, w] = *xt.shape() else {
            return Err(Error::shape("maxpool2d", format!("input must be [C, H, W], got {:?}", xt.shape())));
        };
        if window.0 == 0 || window.1 == 0 || window.0 > h || window.1 > w {
            return Err(Error::shape("maxpool2d", format!("window {window:?} does not fit spatial dims ({h}, {w})")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("maxpool2d", "stride must be at least 1"));
        }
        let oh = (h - window.0) / stride.0 + 1;
        let ow = (w - window.1) / stride.1 + 1;
        let d = xt.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for wy in 0..window.0 {
                        for wx in 0..window.1 {
                            let i = (ch * h + oy * stride.0 + wy) * w + ox * stride.1 + wx;
                            if best_i == usize::MAX || d[i] > best {
                                best = d[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, oh, ow], out), Op::MaxPool { x, argmax }, rg))
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, c) = rows_cols(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            row.iter_mut().for_each(|v| {
                *v = (*v - m).exp();
                z += *v;
            });
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Log-softmax along the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, c) = rows_cols(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, c) = rows_cols(xt.shape());
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape("layer_norm", format!("affine parameters must be [{c}]")));
        }
        let mut xhat = xt.data().to_vec();
        let mut inv_std = Vec::with_capacity(xt.numel() / c);
        for row in xhat.chunks_exact_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            for ((o, g), b) in row.iter_mut().zip(gt.data()).zip(bt.data()) {
                *o = *o * g + b;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Scales each trailing-axis row to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, c) = rows_cols(t.shape());
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.numel() / c);
        for row in out.chunks_exact_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_matrix("slice_cols", self.value(x))?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("columns {start}..{} out of range for width {c}", start + len)));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in d.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (r, _) = as_matrix("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = as_matrix("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} and {pr} differ")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * wd..(i + 1) * wd]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::stack(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Stack(parts.to_vec()), rg))
    }

    /// Gathers sub-tensors along the leading axis (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if rows.is_empty() {
            return Err(Error::Empty("select_rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("select_rows", format!("row {bad} out of range for leading dimension {n}")));
        }
        let inner = t.numel() / n;
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        if shape.len() == 1 {
            shape.push(1);
        }
        shape[0] = rows.len();
        let rg = self.rg(x);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Embedding lookup; alias for [`Graph::select_rows`] on a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.select_rows(table, ids)
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix("diag", self.value(x))?;
        if r != c {
            return Err(Error::shape("diag", format!("matrix is {r}x{c}, not square")));
        }
        let d = self.value(x).data();
        let out = (0..r).map(|i| d[i * c + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![r], out), Op::Diag(x), rg))
    }

    /// Runs the adjoint pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.adjoint(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::from_parts(shape, vec![0.0; node.value.numel()]),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn adjoint(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * vb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * va[i];
                    }
                });
            }
            Op::Affine(x, factor) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += factor * d));
            }
            Op::ScaleBy(x, s) => {
                let factor = val(*s)[0];
                let vx = val(*x);
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += factor * d));
                acc(*s, &mut |g| g[0] += vx.iter().zip(gout).map(|(v, d)| v * d).sum::<f64>());
            }
            Op::Recip(x) => {
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= gout[i] * out[i] * out[i];
                    }
                });
            }
            Op::Exp(x) => {
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * out[i];
                    }
                });
            }
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / vx[i];
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_grad(vx[i]);
                    }
                });
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * sigmoid(vx[i]);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gout[0]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gout[0] / n));
            }
            Op::MeanRows(x) => {
                let r = self.nodes[x.0].value.shape()[0] as f64;
                let c = gout.len();
                acc(*x, &mut |g| {
                    for row in g.chunks_exact_mut(c) {
                        row.iter_mut().zip(gout).for_each(|(g, d)| *g += d / r);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
            }
            Op::Transpose(x) => {
                let [r, c] = *self.nodes[x.0].value.shape() else { unreachable!() };
                acc(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let [m, k] = *self.nodes[a.0].value.shape() else { unreachable!() };
                let n = self.nodes[b.0].value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(*a, &mut |g| gemm(m, n, k, gout, false, vb, true, g, 1.0));
                acc(*b, &mut |g| gemm(k, m, n, va, true, gout, false, g, 1.0));
            }
            Op::MatMulNt(a, b) => {
                let [m, k] = *self.nodes[a.0].value.shape() else { unreachable!() };
                let n = self.nodes[b.0].value.shape()[0];
                let (va, vb) = (val(*a), val(*b));
                // C = A·Bᵀ: dA = dC · B, dB = dCᵀ · A
                acc(*a, &mut |g| gemm(m, n, k, gout, false, vb, false, g, 1.0));
                acc(*b, &mut |g| gemm(n, m, k, gout, true, va, false, g, 1.0));
            }
            Op::Linear { x, w, b } => {
                let [dout, din] = *self.nodes[w.0].value.shape() else { unreachable!() };
                let rows = gout.len() / dout;
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |g| gemm(rows, dout, din, gout, false, vw, false, g, 1.0));
                acc(*w, &mut |g| gemm(dout, rows, din, gout, true, vx, false, g, 1.0));
                acc(*b, &mut |g| {
                    for row in gout.chunks_exact(dout) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Conv2d { x, w, b, geo, cols } => {
                let cout = self.nodes[w.0].value.shape()[0];
                let (k, l) = (geo.patch_len(), geo.out_len());
                let vw = val(*w);
                acc(*w, &mut |g| gemm(cout, l, k, gout, false, cols, true, g, 1.0));
                acc(*b, &mut |g| {
                    for (gc, row) in g.iter_mut().zip(gout.chunks_exact(l)) {
                        *gc += row.iter().sum::<f64>();
                    }
                });
                acc(*x, &mut |g| {
                    let mut dcols = vec![0.0; k * l];
                    gemm(k, cout, l, vw, true, gout, false, &mut dcols, 0.0);
                    col2im(&dcols, geo, g);
                });
            }
            Op::AddChannel(x, v) => {
                let c = self.nodes[v.0].value.numel();
                let plane = gout.len() / c;
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
                acc(*v, &mut |g| {
                    for (gc, chunk) in g.iter_mut().zip(gout.chunks_exact(plane)) {
                        *gc += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, &mut |g| {
                    for (&i, d) in argmax.iter().zip(gout) {
                        g[i] += d;
                    }
                });
            }
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for ((grow, yrow), drow) in g.chunks_exact_mut(c).zip(out.chunks_exact(c)).zip(gout.chunks_exact(c)) {
                        let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                        for j in 0..c {
                            grow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for ((grow, yrow), drow) in g.chunks_exact_mut(c).zip(out.chunks_exact(c)).zip(gout.chunks_exact(c)) {
                        let total: f64 = drow.iter().sum();
                        for j in 0..c {
                            grow[j] += drow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = *node.value.shape().last().unwrap();
                let vg = val(*gamma);
                acc(*gamma, &mut |g| {
                    for (xr, dr) in xhat.chunks_exact(c).zip(gout.chunks_exact(c)) {
                        for j in 0..c {
                            g[j] += xr[j] * dr[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for dr in gout.chunks_exact(c) {
                        g.iter_mut().zip(dr).for_each(|(g, d)| *g += d);
                    }
                });
                acc(*x, &mut |g| {
                    for (((grow, xr), dr), is) in g
                        .chunks_exact_mut(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(gout.chunks_exact(c))
                        .zip(inv_std)
                    {
                        let dxhat: Vec<f64> = dr.iter().zip(vg).map(|(d, g)| d * g).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                        for j in 0..c {
                            grow[j] += is * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for (((grow, yrow), drow), &n) in g
                        .chunks_exact_mut(c)
                        .zip(out.chunks_exact(c))
                        .zip(gout.chunks_exact(c))
                        .zip(norms)
                    {
                        if n == 0.0 {
                            continue;
                        }
                        let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                        for j in 0..c {
                            grow[j] += (drow[j] - yrow[j] * dot) / n;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.shape()[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (grow, drow) in g.chunks_exact_mut(c).zip(gout.chunks_exact(len)) {
                        grow[*start..*start + len].iter_mut().zip(drow).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let wd = self.nodes[p.0].value.shape()[1];
                    acc(p, &mut |g| {
                        for (grow, drow) in g.chunks_exact_mut(wd).zip(gout.chunks_exact(total)) {
                            grow.iter_mut().zip(&drow[offset..offset + wd]).for_each(|(g, d)| *g += d);
                        }
                    });
                    offset += wd;
                }
            }
            Op::Stack(parts) => {
                let inner = gout.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    acc(p, &mut |g| {
                        g.iter_mut().zip(&gout[i * inner..(i + 1) * inner]).for_each(|(g, d)| *g += d);
                    });
                }
            }
            Op::SelectRows { x, rows } => {
                let inner = gout.len() / rows.len();
                acc(*x, &mut |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        g[r * inner..(r + 1) * inner]
                            .iter_mut()
                            .zip(&gout[k * inner..(k + 1) * inner])
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Diag(x) => {
                let c = gout.len();
                acc(*x, &mut |g| {
                    for i in 0..c {
                        g[i * c + i] += gout[i];
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
