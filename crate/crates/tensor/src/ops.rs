//! Differentiable operators on [`Var`].

use crate::error::{Result, TensorError};
use crate::kernels::{self, Window, PADDED};
use crate::tape::{BinaryKind, GradSink, Op, ReduceKind, UnaryKind, Var};
use crate::tensor::{numel, Real, Tensor};

/// Padding sentinel for max pooling; padded cells never win.
pub const MAXPOOL_PAD: f64 = -3.4e38;

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || numel(a) == 1 || numel(b) == 1
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: BinaryKind, name: &'static str) -> Result<Self> {
        self.same_tape(&other);
        let tape = self.tape;
        let (value, rg) = {
            let nodes = tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if !broadcast_ok(a.shape(), b.shape()) {
                return Err(TensorError::mismatch(name, a.shape(), b.shape()));
            }
            let f = |x: T, y: T| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            let value = if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else if b.numel() == 1 {
                let y = b.data()[0];
                a.map(|x| f(x, y))
            } else {
                let x = a.data()[0];
                b.map(|y| f(x, y))
            };
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (value, rg)
        };
        Ok(tape.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, BinaryKind::Div, "div")
    }

    fn unary(self, kind: UnaryKind) -> Self {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            let value = match kind {
                UnaryKind::Neg => a.map(|x| -x),
                UnaryKind::Scale(c) => {
                    let c = T::of(c);
                    a.map(|x| x * c)
                }
                UnaryKind::AddScalar(c) => {
                    let c = T::of(c);
                    a.map(|x| x + c)
                }
                UnaryKind::Relu => a.map(|x| if x > T::zero() { x } else { T::zero() }),
                UnaryKind::Sigmoid => a.map(|x| {
                    if x >= T::zero() {
                        T::one() / (T::one() + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (T::one() + e)
                    }
                }),
                UnaryKind::Log => a.map(|x| x.ln()),
                UnaryKind::Exp => a.map(|x| x.exp()),
                UnaryKind::Clamp(lo, hi) => {
                    let (lo, hi) = (T::of(lo), T::of(hi));
                    a.map(|x| x.max(lo).min(hi))
                }
            };
            (value, nodes[self.id].requires_grad)
        };
        self.tape.push(value, Op::Unary { kind, a: self.id }, rg)
    }

    pub fn neg(self) -> Self {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(self, c: f64) -> Self {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        self.unary(UnaryKind::AddScalar(c))
    }

    /// `1 − x`.
    pub fn one_minus(self) -> Self {
        self.neg().add_scalar(1.0)
    }

    pub fn relu(self) -> Self {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn ln(self) -> Self {
        self.unary(UnaryKind::Log)
    }

    pub fn exp(self) -> Self {
        self.unary(UnaryKind::Exp)
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo ≤ x ≤ hi`.
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(&other);
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::mismatch("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![T::zero(); m * n];
            kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut c);
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (Tensor::from_parts(vec![m, n], c), rg)
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(self) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.rank() != 2 {
                return Err(TensorError::invalid("transpose", a.shape(), "expected rank 2"));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            (
                Tensor::from_parts(vec![c, r], kernels::transpose(r, c, a.data())),
                nodes[self.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Transpose { a: self.id }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            (a.clone().reshape(shape)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, rg))
    }

    /// 2-D convolution of `x: C_in×H×W` with `w: C_out×C_in×k×k`.
    pub fn conv2d(
        self,
        w: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        self.same_tape(&w);
        let (value, rg, geom, cols) = {
            let nodes = self.tape.nodes();
            let (x, wt) = (&nodes[self.id].value, &nodes[w.id].value);
            if x.rank() != 3 || wt.rank() != 4 {
                return Err(TensorError::mismatch("conv2d", x.shape(), wt.shape()));
            }
            let (c_out, c_in, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
            if c_in != x.shape()[0] || kh != kw {
                return Err(TensorError::mismatch("conv2d", x.shape(), wt.shape()));
            }
            let geom = Window {
                channels: c_in,
                height: x.shape()[1],
                width: x.shape()[2],
                kernel: kh,
                stride,
                pad,
            };
            let (Some(oh), Some(ow)) = (
                Window::out_dim(geom.height, kh, stride, pad),
                Window::out_dim(geom.width, kh, stride, pad),
            ) else {
                return Err(TensorError::invalid(
                    "conv2d",
                    x.shape(),
                    format!("kernel {kh}, stride {stride}, pad {pad} leaves no output"),
                ));
            };
            let mut rg = nodes[self.id].requires_grad || nodes[w.id].requires_grad;
            let plane = oh * ow;
            let mut out = vec![T::zero(); c_out * plane];
            if let Some(b) = bias {
                self.same_tape(&b);
                let bv = &nodes[b.id].value;
                if bv.shape() != [c_out] {
                    return Err(TensorError::mismatch("conv2d bias", bv.shape(), &[c_out]));
                }
                for (o, &bo) in bv.data().iter().enumerate() {
                    out[o * plane..(o + 1) * plane].fill(bo);
                }
                rg |= nodes[b.id].requires_grad;
            }
            let cols = if geom.is_pointwise() {
                x.data().to_vec()
            } else {
                kernels::im2col(&geom, x.data())
            };
            kernels::gemm_nn(c_out, c_in * kh * kh, plane, wt.data(), &cols, &mut out);
            let cols = if rg { cols } else { Vec::new() };
            (Tensor::from_parts(vec![c_out, oh, ow], out), rg, geom, cols)
        };
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: bias.map(|b| b.id),
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Max pooling over `C×H×W` with a square window. Padded cells take
    /// `pad_value`; use [`MAXPOOL_PAD`] for plain max semantics.
    pub fn maxpool2d(self, kernel: usize, stride: usize, pad: usize, pad_value: f64) -> Result<Self> {
        let (value, rg, argmax) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if x.rank() != 3 {
                return Err(TensorError::invalid("maxpool2d", x.shape(), "expected C×H×W"));
            }
            let geom = Window {
                channels: x.shape()[0],
                height: x.shape()[1],
                width: x.shape()[2],
                kernel,
                stride,
                pad,
            };
            let (Some(oh), Some(ow)) = (
                Window::out_dim(geom.height, kernel, stride, pad),
                Window::out_dim(geom.width, kernel, stride, pad),
            ) else {
                return Err(TensorError::invalid(
                    "maxpool2d",
                    x.shape(),
                    format!("kernel {kernel}, stride {stride}, pad {pad} leaves no output"),
                ));
            };
            let (out, arg) = kernels::maxpool2d(&geom, x.data(), T::of(pad_value));
            (
                Tensor::from_parts(vec![geom.channels, oh, ow], out),
                nodes[self.id].requires_grad,
                arg,
            )
        };
        Ok(self.tape.push(value, Op::MaxPool2d { x: self.id, argmax }, rg))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if axis >= a.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "softmax",
                    axis,
                    rank: a.rank(),
                });
            }
            let (outer, len, inner) = kernels::axis_split(a.shape(), axis);
            let data = kernels::softmax_lanes(outer, len, inner, a.data());
            (
                Tensor::from_parts(a.shape().to_vec(), data),
                nodes[self.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Softmax { a: self.id, axis }, rg))
    }

    /// Sum or mean over `axes`, which are removed from the shape.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Self> {
        let (value, rg, out_index) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            let rank = a.rank();
            if let Some(&bad) = axes.iter().find(|&&ax| ax >= rank) {
                return Err(TensorError::InvalidAxis {
                    op: "reduce",
                    axis: bad,
                    rank,
                });
            }
            let keep: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
            let out_shape: Vec<usize> = keep.iter().map(|&d| a.shape()[d]).collect();
            let n_out = numel(&out_shape);
            // A full reduction needs no index: everything maps to slot 0.
            let out_index = if n_out == 1 { Vec::new() } else { reduce_index(a.shape(), &keep) };
            let mut acc = vec![0.0f64; n_out];
            if n_out == 1 {
                acc[0] = a.data().iter().map(|v| v.as_f64()).sum();
            } else {
                for (&v, &o) in a.data().iter().zip(&out_index) {
                    acc[o] += v.as_f64();
                }
            }
            if kind == ReduceKind::Mean {
                let count = (a.numel() / n_out) as f64;
                acc.iter_mut().for_each(|v| *v /= count);
            }
            let data = acc.into_iter().map(T::of).collect();
            (
                Tensor::from_parts(out_shape, data),
                nodes[self.id].requires_grad,
                out_index,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Reduce {
                a: self.id,
                kind,
                out_index,
            },
            rg,
        ))
    }

    pub fn sum(self) -> Self {
        let rank = self.with_value(|v| v.rank());
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(ReduceKind::Sum, &axes).expect("all axes are valid")
    }

    pub fn mean(self) -> Self {
        let rank = self.with_value(|v| v.rank());
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(ReduceKind::Mean, &axes).expect("all axes are valid")
    }

    /// Bilinear resize of `C×H×W` (align-corners false).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.rank() != 3 || out_h == 0 || out_w == 0 {
                return Err(TensorError::invalid(
                    "resize_bilinear",
                    a.shape(),
                    format!("cannot resize to {out_h}×{out_w}"),
                ));
            }
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let data = kernels::resize_bilinear(c, h, w, a.data(), out_h, out_w);
            (
                Tensor::from_parts(vec![c, out_h, out_w], data),
                nodes[self.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Resize { a: self.id }, rg))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Self> {
        let first = *parts.first().ok_or_else(|| TensorError::Config {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let tape = first.tape;
        let (value, rg) = {
            let nodes = tape.nodes();
            let head = &nodes[first.id].value;
            if head.rank() == 0 {
                return Err(TensorError::invalid("concat", head.shape(), "scalar input"));
            }
            let tail = head.shape()[1..].to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            let mut rg = false;
            for p in parts {
                first.same_tape(p);
                let v = &nodes[p.id].value;
                if v.rank() != head.rank() || v.shape()[1..] != tail[..] {
                    return Err(TensorError::mismatch("concat", head.shape(), v.shape()));
                }
                lead += v.shape()[0];
                data.extend_from_slice(v.data());
                rg |= nodes[p.id].requires_grad;
            }
            let mut shape = vec![lead];
            shape.extend(tail);
            (Tensor::from_parts(shape, data), rg)
        };
        Ok(tape.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow(self, start: usize, len: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.rank() == 0 || len == 0 || start + len > a.shape()[0] {
                return Err(TensorError::invalid(
                    "narrow",
                    a.shape(),
                    format!("rows {start}..{} out of range", start + len),
                ));
            }
            let row = a.numel() / a.shape()[0];
            let mut shape = a.shape().to_vec();
            shape[0] = len;
            let data = a.data()[start * row..(start + len) * row].to_vec();
            (Tensor::from_parts(shape, data), nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Slice { a: self.id, start }, rg))
    }

    /// Splits axis 0 into `n` equal parts.
    pub fn split(self, n: usize) -> Result<Vec<Self>> {
        let shape = self.shape();
        if n == 0 || shape.is_empty() || shape[0] % n != 0 {
            return Err(TensorError::Config {
                op: "split",
                reason: format!("{shape:?} cannot be split into {n} equal parts along axis 0"),
            });
        }
        let len = shape[0] / n;
        (0..n).map(|i| self.narrow(i * len, len)).collect()
    }

    /// Standardizes each lane along `axis` to zero mean and unit (biased)
    /// variance.
    pub fn normalize(self, axis: usize, eps: f64) -> Result<Self> {
        let (value, rg, inv_std) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if axis >= a.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "normalize",
                    axis,
                    rank: a.rank(),
                });
            }
            let (outer, len, inner) = kernels::axis_split(a.shape(), axis);
            let x = a.data();
            let mut out = vec![T::zero(); x.len()];
            let mut inv_std = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let mean = (0..len).map(|k| x[at(k)].as_f64()).sum::<f64>() / len as f64;
                    let var = (0..len)
                        .map(|k| (x[at(k)].as_f64() - mean).powi(2))
                        .sum::<f64>()
                        / len as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for k in 0..len {
                        out[at(k)] = T::of((x[at(k)].as_f64() - mean) * inv);
                    }
                    inv_std.push(T::of(inv));
                }
            }
            (
                Tensor::from_parts(a.shape().to_vec(), out),
                nodes[self.id].requires_grad,
                inv_std,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Normalize {
                a: self.id,
                axis,
                inv_std,
            },
            rg,
        ))
    }

    /// `x[c, …] · gamma[c] + beta[c]` for `x` with leading channel axis.
    pub fn channel_affine(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Self> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
            );
            if x.rank() == 0 || g.shape() != [x.shape()[0]] || b.shape() != g.shape() {
                return Err(TensorError::mismatch("channel_affine", x.shape(), g.shape()));
            }
            let c = x.shape()[0];
            let plane = x.numel() / c;
            let mut out = x.data().to_vec();
            for ch in 0..c {
                let (gv, bv) = (g.data()[ch], b.data()[ch]);
                out[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * gv + bv);
            }
            let rg = nodes[self.id].requires_grad
                || nodes[gamma.id].requires_grad
                || nodes[beta.id].requires_grad;
            (Tensor::from_parts(x.shape().to_vec(), out), rg)
        };
        Ok(self.tape.push(
            value,
            Op::ChannelAffine {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
            rg,
        ))
    }
}

/// For every input element, the flat index of the output element it
/// reduces into when only the `keep` axes survive.
fn reduce_index(shape: &[usize], keep: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut out_stride = vec![0usize; rank];
    let mut s = 1;
    for &d in keep.iter().rev() {
        out_stride[d] = s;
        s *= shape[d];
    }
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut current = 0usize;
    for _ in 0..total {
        index.push(current);
        for d in (0..rank).rev() {
            counter[d] += 1;
            current += out_stride[d];
            if counter[d] < shape[d] {
                break;
            }
            current -= out_stride[d] * shape[d];
            counter[d] = 0;
        }
    }
    index
}

/// `slot[i] += g[i] · d(i)`.
#[inline]
fn scatter<T: Real>(slot: &mut [T], g: &[T], d: impl Fn(usize) -> T) {
    for (i, (s, &gi)) in slot.iter_mut().zip(g).enumerate() {
        *s += gi * d(i);
    }
}

/// Gradient of one binary operand of `len` elements; a scalar operand
/// broadcast over `g` receives the sum.
#[inline]
fn route<T: Real>(sink: &mut GradSink<'_, T>, id: usize, len: usize, g: &[T], d: impl Fn(usize) -> T) {
    let Some(slot) = sink.slot(id) else { return };
    if len == g.len() {
        scatter(slot, g, d);
    } else {
        let acc: f64 = (0..g.len()).map(|i| (g[i] * d(i)).as_f64()).sum();
        slot[0] += T::of(acc);
    }
}

pub(crate) fn backward<T: Real>(op: &Op<T>, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let nodes = sink.nodes();
    let value = |id: usize| &nodes[id].value;
    match op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (ad, bd) = (value(*a).data(), value(*b).data());
            let pick = |t: &[T], i: usize| if t.len() == 1 { t[0] } else { t[i] };
            match kind {
                BinaryKind::Add => {
                    route(sink, *a, ad.len(), g, |_| T::one());
                    route(sink, *b, bd.len(), g, |_| T::one());
                }
                BinaryKind::Sub => {
                    route(sink, *a, ad.len(), g, |_| T::one());
                    route(sink, *b, bd.len(), g, |_| -T::one());
                }
                BinaryKind::Mul => {
                    route(sink, *a, ad.len(), g, |i| pick(bd, i));
                    route(sink, *b, bd.len(), g, |i| pick(ad, i));
                }
                BinaryKind::Div => {
                    route(sink, *a, ad.len(), g, |i| T::one() / pick(bd, i));
                    route(sink, *b, bd.len(), g, |i| {
                        let d = pick(bd, i);
                        -pick(ad, i) / (d * d)
                    });
                }
            }
        }
        Op::Unary { kind, a } => {
            let x = value(*a).data();
            let y = out.data();
            let Some(slot) = sink.slot(*a) else { return };
            let zero = T::zero();
            match *kind {
                UnaryKind::Neg => scatter(slot, g, |_| -T::one()),
                UnaryKind::Scale(c) => {
                    let c = T::of(c);
                    scatter(slot, g, |_| c)
                }
                UnaryKind::AddScalar(_) => scatter(slot, g, |_| T::one()),
                UnaryKind::Relu => scatter(slot, g, |i| if x[i] > zero { T::one() } else { zero }),
                UnaryKind::Sigmoid => scatter(slot, g, |i| y[i] * (T::one() - y[i])),
                UnaryKind::Log => scatter(slot, g, |i| T::one() / x[i]),
                UnaryKind::Exp => scatter(slot, g, |i| y[i]),
                UnaryKind::Clamp(lo, hi) => {
                    let (lo, hi) = (T::of(lo), T::of(hi));
                    scatter(slot, g, |i| if x[i] >= lo && x[i] <= hi { T::one() } else { zero })
                }
            }
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (value(*a), value(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(slot) = sink.slot(*a) {
                kernels::gemm_nt(m, n, k, g, bv.data(), slot);
            }
            if let Some(slot) = sink.slot(*b) {
                kernels::gemm_tn(k, m, n, av.data(), g, slot);
            }
        }
        Op::Transpose { a } => {
            let (r, c) = (value(*a).shape()[0], value(*a).shape()[1]);
            sink.add(*a, &kernels::transpose(c, r, g));
        }
        Op::Reshape { a } => sink.add(*a, g),
        Op::Conv2d { x, w, b, geom, cols } => {
            let c_out = out.shape()[0];
            let plane = out.shape()[1] * out.shape()[2];
            let kk = geom.channels * geom.kernel * geom.kernel;
            if let Some(slot) = b.and_then(|b| sink.slot(b)) {
                for (o, s) in slot.iter_mut().enumerate() {
                    *s += sum_f64(&g[o * plane..(o + 1) * plane]);
                }
            }
            if let Some(slot) = sink.slot(*w) {
                kernels::gemm_nt(c_out, plane, kk, g, cols, slot);
            }
            if let Some(slot) = sink.slot(*x) {
                let wv = value(*w).data();
                if geom.is_pointwise() {
                    kernels::gemm_tn(kk, c_out, plane, wv, g, slot);
                } else {
                    let mut dcols = vec![T::zero(); kk * plane];
                    kernels::gemm_tn(kk, c_out, plane, wv, g, &mut dcols);
                    kernels::col2im(geom, &dcols, slot);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(slot) = sink.slot(*x) {
                for (&ix, &v) in argmax.iter().zip(g) {
                    if ix != PADDED {
                        slot[ix] += v;
                    }
                }
            }
        }
        Op::Softmax { a, axis } => {
            let Some(slot) = sink.slot(*a) else { return };
            let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
            kernels::softmax_lanes_backward(outer, len, inner, out.data(), g, slot);
        }
        Op::Reduce { a, kind, out_index } => {
            let Some(slot) = sink.slot(*a) else { return };
            let scale = match kind {
                ReduceKind::Sum => T::one(),
                ReduceKind::Mean => T::of(g.len() as f64 / slot.len() as f64),
            };
            if out_index.is_empty() {
                let d = g[0] * scale;
                slot.iter_mut().for_each(|s| *s += d);
            } else {
                for (s, &o) in slot.iter_mut().zip(out_index) {
                    *s += g[o] * scale;
                }
            }
        }
        Op::Resize { a } => {
            let shape = value(*a).shape();
            if let Some(slot) = sink.slot(*a) {
                kernels::resize_bilinear_backward(
                    shape[0],
                    shape[1],
                    shape[2],
                    g,
                    out.shape()[1],
                    out.shape()[2],
                    slot,
                );
            }
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = value(p).numel();
                sink.add(p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::Slice { a, start } => {
            let row = out.numel() / out.shape()[0];
            if let Some(slot) = sink.slot(*a) {
                let dst = &mut slot[start * row..start * row + g.len()];
                dst.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
            }
        }
        Op::Normalize { a, axis, inv_std } => {
            let Some(slot) = sink.slot(*a) else { return };
            let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
            let xhat = out.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let mut mg = 0.0f64;
                    let mut mgx = 0.0f64;
                    for k in 0..len {
                        mg += g[at(k)].as_f64();
                        mgx += (g[at(k)] * xhat[at(k)]).as_f64();
                    }
                    let mg = T::of(mg / len as f64);
                    let mgx = T::of(mgx / len as f64);
                    let inv = inv_std[o * inner + i];
                    for k in 0..len {
                        slot[at(k)] += inv * (g[at(k)] - mg - xhat[at(k)] * mgx);
                    }
                }
            }
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let c = out.shape()[0];
            let plane = out.numel() / c;
            if let Some(slot) = sink.slot(*beta) {
                for (ch, s) in slot.iter_mut().enumerate() {
                    *s += sum_f64(&g[ch * plane..(ch + 1) * plane]);
                }
            }
            let (xv, gv) = (value(*x).data(), value(*gamma).data());
            if let Some(slot) = sink.slot(*gamma) {
                for (ch, s) in slot.iter_mut().enumerate() {
                    let r = ch * plane..(ch + 1) * plane;
                    let acc: f64 = g[r.clone()]
                        .iter()
                        .zip(&xv[r])
                        .map(|(&a, &b)| (a * b).as_f64())
                        .sum();
                    *s += T::of(acc);
                }
            }
            if let Some(slot) = sink.slot(*x) {
                for ch in 0..c {
                    let scale = gv[ch];
                    slot[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .zip(&g[ch * plane..(ch + 1) * plane])
                        .for_each(|(s, &v)| *s += v * scale);
                }
            }
        }
    }
}

fn sum_f64<T: Real>(xs: &[T]) -> T {
    T::of(xs.iter().map(|v| v.as_f64()).sum())
}
