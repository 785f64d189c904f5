//! Reverse-mode gradient tape.
//!
//! Every primitive appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so a
//! single reverse sweep over the node list visits consumers before producers.

use crate::error::{AutodiffError, Result};
use crate::kernels::{col2im_add, gemm, im2col, ConvGeometry};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Elu(Var, T),
    Sigmoid(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalMeanPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    MaskedSoftmax(Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    OuterAdd(Var, Var),
    BceWithLogits {
        logits: Var,
        target: Tensor<T>,
        pos_weight: T,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Lower bound applied to vector norms inside [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn mismatch<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid<T: Real>(op: &'static str, t: &Tensor<T>, reason: &str) -> AutodiffError {
    AutodiffError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.to_string(),
    }
}

/// `rhs` broadcasts against `lhs` when it equals a trailing slice of its shape.
fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    let rhs_len: usize = rhs.iter().product();
    if rhs_len == 1 {
        return true;
    }
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn softmax_rows<T: Real>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, row) in x.chunks(cols).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        let mut z = 0.0f64;
        for j in (0..cols).filter(|&j| keep(j)) {
            let e = (row[j] - max).exp();
            out[r * cols + j] = e;
            z += e.to64();
        }
        for j in (0..cols).filter(|&j| keep(j)) {
            out[r * cols + j] = T::of(out[r * cols + j].to64() / z);
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, T::zero(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(invalid("transpose", t, "expected a matrix"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, KH, KW]` and an
    /// optional per-output-channel bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 4 || tw.ndim() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(mismatch("conv2d", tx, tw));
        }
        if stride == 0 {
            return Err(invalid("conv2d", tw, "stride must be positive"));
        }
        let [n, c, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [o, _, kh, kw] = [tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]];
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", tx, tw));
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != o {
                return Err(mismatch("conv2d bias", tw, tb));
            }
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        // Columns of every sample side by side: `[C*KH*KW, N*OH*OW]`.
        let ld = n * cc;
        let mut cols = vec![T::zero(); cr * ld];
        let img = c * h * wd;
        for s in 0..n {
            im2col(&tx.data()[s * img..(s + 1) * img], &geom, &mut cols[s * cc..], ld);
        }
        let mut wide = vec![T::zero(); o * ld];
        gemm(o, cr, ld, tw.data(), false, &cols, false, T::zero(), &mut wide);
        let mut out = vec![T::zero(); n * o * cc];
        for (ch, row) in wide.chunks(ld).enumerate() {
            for (s, block) in row.chunks(cc).enumerate() {
                out[(s * o + ch) * cc..(s * o + ch + 1) * cc].copy_from_slice(block);
            }
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (ch, plane) in out.chunks_mut(cc).enumerate() {
                let bv = bias[ch % o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&[n, o, geom.out_h(), geom.out_w()], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        let alpha = T::of(alpha);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { alpha * v.exp_m1() },
            Op::Elu(x, alpha),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Log(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    /// Non-overlapping `k x k` max pooling over `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 || k == 0 || t.shape()[2] < k || t.shape()[3] < k {
            return Err(invalid("max_pool2d", t, "expected [N,C,H,W] with H,W >= k"));
        }
        let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        let (oh, ow) = (h / k, w / k);
        let src = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Spatial mean of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 {
            return Err(invalid("global_mean_pool", t, "expected [N,C,H,W]"));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let hw = t.shape()[2] * t.shape()[3];
        let out = t
            .data()
            .chunks(hw)
            .map(|p| T::of(p.iter().map(|&v| v.to64()).sum::<f64>() / hw as f64))
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalMeanPool(x), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta.shape(), tb.shape()) {
            return Err(mismatch(name, ta, tb));
        }
        let m = tb.len();
        let bd = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % m])).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
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

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v.to64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v.to64()).sum();
        let value = Tensor::scalar(T::of(s / t.len() as f64));
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.value(v))
            .ok_or_else(|| AutodiffError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            })?;
        let lead = &first.shape()[..first.ndim().saturating_sub(1)];
        let rows = first.rows();
        let mut total = 0;
        for &v in xs {
            let t = self.value(v);
            if t.ndim() != first.ndim() || &t.shape()[..t.ndim() - 1] != lead {
                return Err(mismatch("concat", first, t));
            }
            total += t.last_dim();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = softmax_rows(t.data(), t.last_dim(), None);
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    fn check_mask(&self, name: &'static str, x: Var, mask: &[bool]) -> Result<()> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if mask.chunks(t.last_dim()).any(|row| !row.iter().any(|&m| m)) {
            return Err(invalid(name, t, "every row needs at least one unmasked entry"));
        }
        Ok(())
    }

    /// Softmax along the last axis restricted to entries where `mask` is true;
    /// masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.check_mask("masked_softmax", x, mask)?;
        let t = self.value(x);
        let data = softmax_rows(t.data(), t.last_dim(), Some(mask));
        let value = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedSoftmax(x), rg))
    }

    /// Log-softmax along the last axis over entries where `mask` is true;
    /// masked entries are set to zero and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.check_mask("masked_log_softmax", x, mask)?;
        let t = self.value(x);
        let cols = t.last_dim();
        let mut out = vec![T::zero(); t.len()];
        for (r, row) in t.data().chunks(cols).enumerate() {
            let m = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let lse = T::of(
                row.iter()
                    .zip(m)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| (v - max).to64().exp())
                    .sum::<f64>()
                    .ln(),
            ) + max;
            for j in 0..cols {
                if m[j] {
                    out[r * cols + j] = row[j] - lse;
                }
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedLogSoftmax(x, mask.to_vec()), rg))
    }

    /// Divide every last-axis row by its L2 norm (floored at [`NORM_EPS`]).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.last_dim();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(cols) {
            let n = T::of(row.iter().map(|&v| v.to64().powi(2)).sum::<f64>().sqrt().max(NORM_EPS));
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::L2Normalize { x, norms }, rg)
    }

    /// Select rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(invalid("gather_rows", t, "expected a matrix"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.shape()[0]) {
            return Err(invalid("gather_rows", t, &format!("row index {bad} out of range")));
        }
        if idx.is_empty() {
            return Err(invalid("gather_rows", t, "empty index list"));
        }
        let mut out = Vec::with_capacity(idx.len() * t.last_dim());
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[idx.len(), t.last_dim()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// `out[i][j] = a[i] + b[j]` for flat `a` (length n) and `b` (length m).
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m) = (ta.len(), tb.len());
        let mut out = Vec::with_capacity(n * m);
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|&y| x + y));
        }
        let value = Tensor::new(&[n, m], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::OuterAdd(a, b), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`, with
    /// positive entries weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, pos_weight: f64) -> Result<Var> {
        let pos_weight = T::of(pos_weight);
        let t = self.value(logits);
        if t.shape() != target.shape() {
            return Err(mismatch("bce_with_logits", t, target));
        }
        let mut s = 0.0f64;
        for (&x, &y) in t.data().iter().zip(target.data()) {
            // log(1 + exp(-x)) and log(1 + exp(x)) in overflow-safe form
            let soft = (-x.abs()).exp().ln_1p();
            let sp_neg = (-x).max(T::zero()) + soft;
            let sp_pos = x.max(T::zero()) + soft;
            s += (pos_weight * y * sp_neg + (T::one() - y) * sp_pos).to64();
        }
        let value = Tensor::scalar(T::of(s / t.len() as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                target: target.clone(),
                pos_weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = node.value.data();
        let zero = T::zero();
        let map_x = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            let xv = self.value(x).data();
            gd.iter().zip(xv).zip(out).map(|((&g, &x), &y)| f(g, x, y)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(a) {
                    let mut da = vec![zero; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, zero, &mut da);
                    self.accumulate(grads, a, da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![zero; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, zero, &mut db);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![zero; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::Reshape(a) => self.accumulate(grads, a, gd.to_vec()),
            Op::Conv2d { x, w, b, geom, cols } => {
                let tw = self.value(*w);
                let n = self.value(*x).shape()[0];
                let o = tw.shape()[0];
                let (cr, cc) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let ld = n * cc;
                let mut gwide = vec![zero; o * ld];
                for (s, sample) in gd.chunks(o * cc).enumerate() {
                    for (ch, plane) in sample.chunks(cc).enumerate() {
                        gwide[ch * ld + s * cc..ch * ld + (s + 1) * cc].copy_from_slice(plane);
                    }
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![zero; o * cr];
                    gemm(o, ld, cr, &gwide, false, cols, true, zero, &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = *b {
                    let db = gwide.chunks(ld).map(|r| r.iter().copied().sum::<T>()).collect();
                    self.accumulate(grads, b, db);
                }
                if self.requires_grad(*x) {
                    let mut dcol = vec![zero; cr * ld];
                    gemm(cr, o, ld, tw.data(), true, &gwide, false, zero, &mut dcol);
                    let mut dx = vec![zero; n * img];
                    for s in 0..n {
                        col2im_add(&dcol[s * cc..], geom, &mut dx[s * img..(s + 1) * img], ld);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::Relu(x) => {
                let d = map_x(x, &|g, x, _| if x > zero { g } else { zero });
                self.accumulate(grads, x, d);
            }
            &Op::LeakyRelu(x, slope) => {
                let d = map_x(x, &|g, x, _| if x > zero { g } else { slope * g });
                self.accumulate(grads, x, d);
            }
            &Op::Elu(x, alpha) => {
                let d = map_x(x, &|g, x, y| if x > zero { g } else { g * (y + alpha) });
                self.accumulate(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = map_x(x, &|g, _, y| g * y * (T::one() - y));
                self.accumulate(grads, x, d);
            }
            &Op::Exp(x) => {
                let d = map_x(x, &|g, _, y| g * y);
                self.accumulate(grads, x, d);
            }
            &Op::Log(x) => {
                let d = map_x(x, &|g, x, _| g / x);
                self.accumulate(grads, x, d);
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, gd.iter().map(|&v| v * c).collect()),
            &Op::AddScalar(x) => self.accumulate(grads, x, gd.to_vec()),
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![zero; self.value(*x).len()];
                for (&gi, &src) in gd.iter().zip(argmax) {
                    d[src] += gi;
                }
                self.accumulate(grads, *x, d);
            }
            &Op::GlobalMeanPool(x) => {
                let t = self.value(x);
                let hw = t.shape()[2] * t.shape()[3];
                let inv = T::one() / T::of(hw as f64);
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect();
                self.accumulate(grads, x, d);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, gd.to_vec());
                let d = self.reduce_broadcast(b, gd.to_vec());
                self.accumulate(grads, b, d);
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, gd.to_vec());
                let d = self.reduce_broadcast(b, gd.iter().map(|&v| -v).collect());
                self.accumulate(grads, b, d);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let m = bv.len();
                if self.requires_grad(a) {
                    let d = gd.iter().enumerate().map(|(i, &g)| g * bv[i % m]).collect();
                    self.accumulate(grads, a, d);
                }
                if self.requires_grad(b) {
                    let full = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    let d = self.reduce_broadcast(b, full);
                    self.accumulate(grads, b, d);
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let m = bv.len();
                if self.requires_grad(a) {
                    let d = gd.iter().enumerate().map(|(i, &g)| g / bv[i % m]).collect();
                    self.accumulate(grads, a, d);
                }
                if self.requires_grad(b) {
                    let full = gd
                        .iter()
                        .zip(av)
                        .enumerate()
                        .map(|(i, (&g, &x))| -g * x / (bv[i % m] * bv[i % m]))
                        .collect();
                    let d = self.reduce_broadcast(b, full);
                    self.accumulate(grads, b, d);
                }
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![gd[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![gd[0] / T::of(n as f64); n]);
            }
            Op::Concat(xs) => {
                let rows = g.rows();
                let total = g.last_dim();
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).last_dim();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    self.accumulate(grads, x, d);
                    offset += c;
                }
            }
            &Op::Softmax(x) | &Op::MaskedSoftmax(x) => {
                let cols = g.last_dim();
                let mut d = vec![zero; gd.len()];
                for r in 0..g.rows() {
                    let (gr, yr) = (&gd[r * cols..(r + 1) * cols], &out[r * cols..(r + 1) * cols]);
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::MaskedLogSoftmax(x, mask) => {
                let cols = g.last_dim();
                let mut d = vec![zero; gd.len()];
                for r in 0..g.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, yr, mr) = (&gd[span.clone()], &out[span.clone()], &mask[span]);
                    let gsum: T = gr.iter().zip(mr).filter(|(_, &m)| m).map(|(&g, _)| g).sum();
                    for j in 0..cols {
                        if mr[j] {
                            d[r * cols + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::L2Normalize { x, norms } => {
                let cols = g.last_dim();
                let mut d = vec![zero; gd.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, yr) = (&gd[span.clone()], &out[span]);
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows(x, idx) => {
                let t = self.value(*x);
                let cols = t.last_dim();
                let mut d = vec![zero; t.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        d[i * cols + j] += gd[r * cols + j];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            &Op::OuterAdd(a, b) => {
                let m = g.shape()[1];
                let da = gd.chunks(m).map(|r| r.iter().copied().sum()).collect();
                let mut db = vec![zero; m];
                for row in gd.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::BceWithLogits {
                logits,
                target,
                pos_weight,
            } => {
                let xv = self.value(*logits).data();
                let scale = gd[0] / T::of(xv.len() as f64);
                let one = T::one();
                let pw = *pos_weight;
                let d = xv
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &y)| {
                        let s = one / (one + (-x).exp());
                        // d/dx [pw*y*softplus(-x) + (1-y)*softplus(x)]
                        scale * (-pw * y * (one - s) + (one - y) * s)
                    })
                    .collect();
                self.accumulate(grads, *logits, d);
            }
        }
    }

    /// Sum a full-size gradient down to the (possibly broadcast) shape of `b`.
    fn reduce_broadcast(&self, b: Var, full: Vec<T>) -> Vec<T> {
        let m = self.value(b).len();
        if m == full.len() {
            return full;
        }
        let mut d = vec![T::zero(); m];
        for (i, v) in full.into_iter().enumerate() {
            d[i % m] += v;
        }
        d
    }
}
