//! Slice-level numeric kernels shared by the tape operators.
//!
//! Everything here is sequential and has a fixed accumulation order, so a
//! given input always produces bitwise-identical output.

use crate::tensor::Real;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of a square-kernel 2-D window operator over a `C×H×W` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// `floor((size + 2·pad − k)/stride) + 1`, or `None` when that is < 1.
    pub fn out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if kernel == 0 || stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn out_h(&self) -> usize {
        Self::out_dim(self.height, self.kernel, self.stride, self.pad).unwrap_or(0)
    }

    pub fn out_w(&self) -> usize {
        Self::out_dim(self.width, self.kernel, self.stride, self.pad).unwrap_or(0)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x: C×H×W` into `(C·k·k) × (OH·OW)` patch columns.
pub fn im2col<T: Real>(g: &Window, x: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); g.channels * k * k * plane];
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto `dx: C×H×W`.
pub fn col2im<T: Real>(g: &Window, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.channels {
        let dst = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[iy as usize * g.width + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Marks a window maximum that came from padding rather than the input.
pub const PADDED: usize = usize::MAX;

/// Max pooling over each channel. Returns the pooled values and, per output
/// cell, the flat input index of the winner (first maximum in row-major scan
/// order) or [`PADDED`].
pub fn maxpool2d<T: Real>(g: &Window, x: &[T], pad_value: T) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.channels * oh * ow);
    let mut arg = Vec::with_capacity(g.channels * oh * ow);
    for c in 0..g.channels {
        let base = c * g.height * g.width;
        for oy in 0..oh {
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let rows_inside = y0 >= 0 && y0 as usize + g.kernel <= g.height;
            for ox in 0..ow {
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                if rows_inside && x0 >= 0 && x0 as usize + g.kernel <= g.width {
                    let start = base + y0 as usize * g.width + x0 as usize;
                    let mut best_ix = start;
                    let mut best = x[start];
                    for ki in 0..g.kernel {
                        let row = start + ki * g.width;
                        for (kj, &v) in x[row..row + g.kernel].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_ix = row + kj;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_ix);
                    continue;
                }
                let mut best = T::zero();
                let mut best_ix = PADDED;
                let mut first = true;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        let inside =
                            iy >= 0 && iy < g.height as isize && ix >= 0 && ix < g.width as isize;
                        let (v, flat) = if inside {
                            let flat = base + iy as usize * g.width + ix as usize;
                            (x[flat], flat)
                        } else {
                            (pad_value, PADDED)
                        };
                        if first || v > best {
                            best = v;
                            best_ix = flat;
                            first = false;
                        }
                    }
                }
                out.push(best);
                arg.push(best_ix);
            }
        }
    }
    (out, arg)
}

/// Source coordinate pair and blend factor for one output index of a
/// half-pixel-centred (align-corners-false) linear resize.
#[derive(Debug, Clone, Copy)]
pub struct LerpTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn lerp_taps(in_size: usize, out_size: usize) -> Vec<LerpTap> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_size - 1);
            let hi = (lo + 1).min(in_size - 1);
            LerpTap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of `x: C×H×W` to `C×out_h×out_w`.
pub fn resize_bilinear<T: Real>(
    channels: usize,
    h: usize,
    w: usize,
    x: &[T],
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if h == out_h && w == out_w {
        return x.to_vec();
    }
    let ty = lerp_taps(h, out_h);
    let tx = lerp_taps(w, out_w);
    let mut out = vec![T::zero(); channels * out_h * out_w];
    for c in 0..channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::of(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::of(b.frac);
                let top = src[a.lo * w + b.lo] * (T::one() - fx) + src[a.lo * w + b.hi] * fx;
                let bot = src[a.hi * w + b.lo] * (T::one() - fx) + src[a.hi * w + b.hi] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Real>(
    channels: usize,
    h: usize,
    w: usize,
    dy: &[T],
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    if h == out_h && w == out_w {
        for (d, &g) in dx.iter_mut().zip(dy) {
            *d += g;
        }
        return;
    }
    let ty = lerp_taps(h, out_h);
    let tx = lerp_taps(w, out_w);
    for c in 0..channels {
        let src = &dy[c * out_h * out_w..(c + 1) * out_h * out_w];
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::of(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::of(b.frac);
                let g = src[oy * out_w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                dst[a.lo * w + b.lo] += gt * (T::one() - fx);
                dst[a.lo * w + b.hi] += gt * fx;
                dst[a.hi * w + b.lo] += gb * (T::one() - fx);
                dst[a.hi * w + b.hi] += gb * fx;
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)` extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the middle extent of an
/// `outer × len × inner` layout.
///
/// Lanes with `inner > 1` are processed a row at a time with per-lane
/// accumulators, so memory is always walked contiguously.
pub fn softmax_lanes<T: Real>(outer: usize, len: usize, inner: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if inner == 1 {
        for (xs, ys) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = 0.0f64;
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = (v - mx).exp();
                total += y.as_f64();
            }
            let inv = T::of(1.0 / total);
            ys.iter_mut().for_each(|y| *y *= inv);
        }
        return out;
    }
    let mut mx = vec![T::neg_infinity(); inner];
    let mut total = vec![0.0f64; inner];
    for o in 0..outer {
        let base = o * len * inner;
        let xs = &x[base..base + len * inner];
        let ys = &mut out[base..base + len * inner];
        mx.iter_mut().for_each(|m| *m = T::neg_infinity());
        total.iter_mut().for_each(|t| *t = 0.0);
        for row in xs.chunks_exact(inner) {
            for (m, &v) in mx.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        for (yrow, xrow) in ys.chunks_exact_mut(inner).zip(xs.chunks_exact(inner)) {
            for i in 0..inner {
                let e = (xrow[i] - mx[i]).exp();
                yrow[i] = e;
                total[i] += e.as_f64();
            }
        }
        let inv: Vec<T> = total.iter().map(|&t| T::of(1.0 / t)).collect();
        for yrow in ys.chunks_exact_mut(inner) {
            for (y, &s) in yrow.iter_mut().zip(&inv) {
                *y *= s;
            }
        }
    }
    out
}

/// Adds the softmax vector-Jacobian product `y ⊙ (g − Σ g⊙y)` into `dx`,
/// with the same layout and traversal as [`softmax_lanes`].
pub fn softmax_lanes_backward<T: Real>(outer: usize, len: usize, inner: usize, y: &[T], g: &[T], dx: &mut [T]) {
    if inner == 1 {
        for ((ys, gs), ds) in y.chunks_exact(len).zip(g.chunks_exact(len)).zip(dx.chunks_exact_mut(len)) {
            let dot = T::of(ys.iter().zip(gs).map(|(&a, &b)| (a * b).as_f64()).sum());
            for ((d, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                *d += yv * (gv - dot);
            }
        }
        return;
    }
    let mut dot = vec![0.0f64; inner];
    for o in 0..outer {
        let base = o * len * inner;
        let r = base..base + len * inner;
        let (ys, gs, ds) = (&y[r.clone()], &g[r.clone()], &mut dx[r]);
        dot.iter_mut().for_each(|d| *d = 0.0);
        for (yrow, grow) in ys.chunks_exact(inner).zip(gs.chunks_exact(inner)) {
            for i in 0..inner {
                dot[i] += (grow[i] * yrow[i]).as_f64();
            }
        }
        let dot: Vec<T> = dot.iter().map(|&d| T::of(d)).collect();
        for ((drow, yrow), grow) in ds.chunks_exact_mut(inner).zip(ys.chunks_exact(inner)).zip(gs.chunks_exact(inner)) {
            for i in 0..inner {
                drow[i] += yrow[i] * (grow[i] - dot[i]);
            }
        }
    }
}
