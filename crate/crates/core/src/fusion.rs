//! Cross-modal fusion of thermal and RGB feature maps with
//! linear-complexity attention.
//!
//! Every tensor is channel-first `C×H×W`. Within each of `n` channel
//! segments the keys are softmaxed over spatial positions and the queries
//! over channels, so the attention reduces to a small `(C_v/n)×(C_k/n)`
//! context matrix instead of an `(HW)×(HW)` map.

use irfusion_tensor::{Binding, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::init;

/// Weights of one fusion block. `_i` projections act on thermal features,
/// `_r` projections on RGB features.
#[derive(Debug, Clone)]
pub struct FusionBlockParams {
    pub channels: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub n: usize,
    pub q_i: ParamId,
    pub k_i: ParamId,
    pub v_i: ParamId,
    pub q_r: ParamId,
    pub k_r: ParamId,
    pub v_r: ParamId,
    pub proj_i: ParamId,
    pub proj_r: ParamId,
}

/// The nine-plus weight handles of a [`FusionBlockParams`] placed on a tape.
#[derive(Clone, Copy)]
pub struct FusionWeights<'t, T: Real> {
    pub q_i: Var<'t, T>,
    pub k_i: Var<'t, T>,
    pub v_i: Var<'t, T>,
    pub q_r: Var<'t, T>,
    pub k_r: Var<'t, T>,
    pub v_r: Var<'t, T>,
    pub proj_i: Var<'t, T>,
    pub proj_r: Var<'t, T>,
}

pub struct FusionOutput<'t, T: Real> {
    pub x_i: Var<'t, T>,
    pub x_r: Var<'t, T>,
}

impl FusionBlockParams {
    pub fn validate(channels: usize, c_k: usize, c_v: usize, n: usize) -> Result<()> {
        if channels == 0 || c_k == 0 || c_v == 0 || n == 0 {
            return Err(CoreError::config("fusion dimensions must be positive"));
        }
        if c_k % n != 0 || c_v % n != 0 {
            return Err(CoreError::config(format!(
                "fusion channels C_k={c_k}, C_v={c_v} are not divisible by n={n}"
            )));
        }
        Ok(())
    }

    /// Registers the eight 1×1 projection weights under `prefix`.
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        c_k: usize,
        c_v: usize,
        n: usize,
    ) -> Result<Self> {
        Self::validate(channels, c_k, c_v, n)?;
        let mut add = |name: &str, c_out: usize, c_in: usize| {
            store.add(format!("{prefix}.{name}"), init::conv(rng, c_out, c_in, 1))
        };
        Ok(FusionBlockParams {
            channels,
            c_k,
            c_v,
            n,
            q_i: add("q_i", c_k, channels),
            k_i: add("k_i", c_k, channels),
            v_i: add("v_i", c_v, channels),
            q_r: add("q_r", c_k, channels),
            k_r: add("k_r", c_k, channels),
            v_r: add("v_r", c_v, channels),
            proj_i: add("proj_i", channels, c_v),
            proj_r: add("proj_r", channels, c_v),
        })
    }

    /// Scalar count of all weights: two modalities, each with Q, K, V and
    /// an output projection.
    pub fn param_count(channels: usize, c_k: usize, c_v: usize) -> usize {
        2 * (channels * (2 * c_k + c_v) + c_v * channels)
    }

    pub fn bind<'t, T: Real>(&self, b: &Binding<'t, T>) -> FusionWeights<'t, T> {
        FusionWeights {
            q_i: b.var(self.q_i),
            k_i: b.var(self.k_i),
            v_i: b.var(self.v_i),
            q_r: b.var(self.q_r),
            k_r: b.var(self.k_r),
            v_r: b.var(self.v_r),
            proj_i: b.var(self.proj_i),
            proj_r: b.var(self.proj_r),
        }
    }
}

/// 1×1 projections of one modality's features to queries, keys and values.
pub fn project_qkv<'t, T: Real>(
    x: Var<'t, T>,
    w_q: Var<'t, T>,
    w_k: Var<'t, T>,
    w_v: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    Ok((
        x.conv2d(w_q, None, 1, 0)?,
        x.conv2d(w_k, None, 1, 0)?,
        x.conv2d(w_v, None, 1, 0)?,
    ))
}

/// Segment-wise `ctx = V̂·softmax_spatial(K̂)ᵀ`, `out = ctx·softmax_channel(Q̂)`.
///
/// `q` and `k` are `C_k×H×W`, `v` is `C_v×H×W`; the result is `C_v×H×W`.
pub fn efficient_cross_attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    n: usize,
) -> Result<Var<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || qs != ks || vs.len() != 3 || vs[1..] != qs[1..] {
        return Err(irfusion_tensor::TensorError::ShapeMismatch {
            op: "efficient_cross_attention",
            lhs: qs,
            rhs: vs,
        }
        .into());
    }
    let (c_k, c_v, hw) = (qs[0], vs[0], qs[1] * qs[2]);
    if n == 0 || c_k % n != 0 || c_v % n != 0 {
        return Err(CoreError::config(format!(
            "cannot split C_k={c_k}, C_v={c_v} into {n} segments"
        )));
    }
    let (dk, dv) = (c_k / n, c_v / n);
    let qs = q.reshape(&[c_k, hw])?.split(n)?;
    let ks = k.reshape(&[c_k, hw])?.split(n)?;
    let vs = v.reshape(&[c_v, hw])?.split(n)?;
    let mut outs = Vec::with_capacity(n);
    for ((qi, ki), vi) in qs.into_iter().zip(ks).zip(vs) {
        debug_assert_eq!((qi.shape()[0], vi.shape()[0]), (dk, dv));
        let ctx = vi.matmul(ki.softmax(1)?.t()?)?;
        outs.push(ctx.matmul(qi.softmax(0)?)?);
    }
    Ok(Var::concat(&outs)?.reshape(&[c_v, q.shape()[1], q.shape()[2]])?)
}

/// Both fusion directions: queries from the modality being updated, keys
/// and values from the other one, projected back and added residually.
pub fn fuse<'t, T: Real>(
    x_i: Var<'t, T>,
    x_r: Var<'t, T>,
    w: &FusionWeights<'t, T>,
    n: usize,
) -> Result<FusionOutput<'t, T>> {
    if x_i.shape() != x_r.shape() {
        return Err(irfusion_tensor::TensorError::ShapeMismatch {
            op: "fuse",
            lhs: x_i.shape(),
            rhs: x_r.shape(),
        }
        .into());
    }
    let (q_i, k_i, v_i) = project_qkv(x_i, w.q_i, w.k_i, w.v_i)?;
    let (q_r, k_r, v_r) = project_qkv(x_r, w.q_r, w.k_r, w.v_r)?;
    let a_i = efficient_cross_attention(q_i, k_r, v_r, n)?;
    let a_r = efficient_cross_attention(q_r, k_i, v_i, n)?;
    Ok(FusionOutput {
        x_i: a_i.conv2d(w.proj_i, None, 1, 0)?.add(x_i)?,
        x_r: a_r.conv2d(w.proj_r, None, 1, 0)?.add(x_r)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionCost {
    /// Bytes of a full `(HW)×(HW)` attention map.
    pub naive_bytes: u64,
    /// Bytes of the segment contexts plus the flattened K, Q and output buffers.
    pub efficient_bytes: u64,
    pub ratio: f64,
}

pub fn attention_cost_estimate(
    h: usize,
    w: usize,
    c_k: usize,
    c_v: usize,
    n: usize,
    bytes_per_elem: usize,
) -> AttentionCost {
    let hw = (h * w) as u64;
    let b = bytes_per_elem as u64;
    let naive_bytes = hw * hw * b;
    let efficient_bytes = efficient_elements(h, w, c_k, c_v, n) as u64 * b;
    AttentionCost {
        naive_bytes,
        efficient_bytes,
        ratio: naive_bytes as f64 / efficient_bytes as f64,
    }
}

/// Element count of every auxiliary buffer the efficient path keeps live.
pub fn efficient_elements(h: usize, w: usize, c_k: usize, c_v: usize, n: usize) -> usize {
    let hw = h * w;
    n * (c_k / n) * (c_v / n) + 2 * c_k * hw + c_v * hw
}

/// Tracks the live and peak element counts of buffers handed out.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct BufferStats {
    pub allocations: usize,
    pub live: usize,
    pub peak: usize,
}

impl BufferStats {
    fn alloc(&mut self, len: usize) -> Vec<f32> {
        self.allocations += 1;
        self.live += len;
        self.peak = self.peak.max(self.live);
        vec![0.0; len]
    }

    fn free(&mut self, buf: Vec<f32>) {
        self.live -= buf.len();
    }
}

fn softmax_rows(rows: usize, cols: usize, src: &[f32], dst: &mut [f32]) {
    for r in 0..rows {
        let s = &src[r * cols..(r + 1) * cols];
        let d = &mut dst[r * cols..(r + 1) * cols];
        let m = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (o, &x) in d.iter_mut().zip(s) {
            *o = (x - m).exp();
            total += *o as f64;
        }
        let inv = (1.0 / total) as f32;
        d.iter_mut().for_each(|o| *o *= inv);
    }
}

fn softmax_cols(rows: usize, cols: usize, src: &[f32], dst: &mut [f32]) {
    for c in 0..cols {
        let m = (0..rows).map(|r| src[r * cols + c]).fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for r in 0..rows {
            let e = (src[r * cols + c] - m).exp();
            dst[r * cols + c] = e;
            total += e as f64;
        }
        let inv = (1.0 / total) as f32;
        (0..rows).for_each(|r| dst[r * cols + c] *= inv);
    }
}

fn check_plain(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>, n: usize) -> Result<(usize, usize, usize)> {
    let (qs, vs) = (q.shape(), v.shape());
    if qs.len() != 3 || qs != k.shape() || vs.len() != 3 || vs[1..] != qs[1..] {
        return Err(irfusion_tensor::TensorError::ShapeMismatch {
            op: "attention",
            lhs: qs.to_vec(),
            rhs: vs.to_vec(),
        }
        .into());
    }
    FusionBlockParams::validate(1, qs[0], vs[0], n)?;
    Ok((qs[0], vs[0], qs[1] * qs[2]))
}

/// Tape-free forward of [`efficient_cross_attention`] that routes every
/// auxiliary buffer through a [`BufferStats`] counter.
pub fn efficient_attention_profiled(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    n: usize,
) -> Result<(Tensor<f32>, BufferStats)> {
    use irfusion_tensor::kernels::{gemm_nn, gemm_nt};
    let (c_k, c_v, hw) = check_plain(q, k, v, n)?;
    let (dk, dv) = (c_k / n, c_v / n);
    let mut stats = BufferStats::default();

    let mut k_soft = stats.alloc(c_k * hw);
    softmax_rows(c_k, hw, k.data(), &mut k_soft);
    let mut q_soft = stats.alloc(c_k * hw);
    for s in 0..n {
        let r = s * dk * hw..(s + 1) * dk * hw;
        softmax_cols(dk, hw, &q.data()[r.clone()], &mut q_soft[r]);
    }
    let mut ctx = stats.alloc(n * dv * dk);
    let mut out = stats.alloc(c_v * hw);
    for s in 0..n {
        let ctx_s = &mut ctx[s * dv * dk..(s + 1) * dv * dk];
        let v_s = &v.data()[s * dv * hw..(s + 1) * dv * hw];
        gemm_nt(dv, hw, dk, v_s, &k_soft[s * dk * hw..(s + 1) * dk * hw], ctx_s);
        gemm_nn(
            dv,
            dk,
            hw,
            ctx_s,
            &q_soft[s * dk * hw..(s + 1) * dk * hw],
            &mut out[s * dv * hw..(s + 1) * dv * hw],
        );
    }
    let result = Tensor::new(v.shape(), out.clone())?;
    for buf in [k_soft, q_soft, ctx, out] {
        stats.free(buf);
    }
    Ok((result, stats))
}

/// The same operator evaluated through the explicit `(HW)×(HW)` map
/// `M = softmax(K̂)ᵀ·softmax(Q̂)` of each segment, `out = V̂·M`.
/// Only [`BufferStats::peak`] of the map itself is counted.
pub fn naive_attention_profiled(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    n: usize,
) -> Result<(Tensor<f32>, BufferStats)> {
    use irfusion_tensor::kernels::{gemm_nn, gemm_tn};
    let (c_k, c_v, hw) = check_plain(q, k, v, n)?;
    let (dk, dv) = (c_k / n, c_v / n);
    let mut k_soft = vec![0.0; c_k * hw];
    softmax_rows(c_k, hw, k.data(), &mut k_soft);
    let mut q_soft = vec![0.0; c_k * hw];
    for s in 0..n {
        let r = s * dk * hw..(s + 1) * dk * hw;
        softmax_cols(dk, hw, &q.data()[r.clone()], &mut q_soft[r]);
    }
    let mut stats = BufferStats::default();
    let mut map = stats.alloc(hw * hw);
    let mut out = vec![0.0; c_v * hw];
    for s in 0..n {
        map.iter_mut().for_each(|m| *m = 0.0);
        let seg = s * dk * hw..(s + 1) * dk * hw;
        gemm_tn(hw, dk, hw, &k_soft[seg.clone()], &q_soft[seg], &mut map);
        gemm_nn(
            dv,
            hw,
            hw,
            &v.data()[s * dv * hw..(s + 1) * dv * hw],
            &map,
            &mut out[s * dv * hw..(s + 1) * dv * hw],
        );
    }
    stats.free(map);
    Ok((Tensor::new(v.shape(), out)?, stats))
}
