//! Dual-branch segmentation network.
//!
//! A residual convolutional branch encodes the thermal image and a small
//! transformer branch encodes the RGB image, each in three stages. After
//! every enabled stage the two feature maps pass through a fusion block
//! and the fused maps continue down their own branches. The decoder reads
//! the RGB-branch features of all stages; an auxiliary head reads the
//! last thermal-branch features.

use irfusion_tensor::{Binding, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::fusion::{fuse, FusionBlockParams};
use crate::init;
use crate::loss::SoftMask;

const NORM_EPS: f64 = 1e-5;
const TRANSFORMER_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_channels: [usize; 3],
    pub stage_strides: [usize; 3],
    /// Fusion after stages 0, 1 and 2.
    pub fusion: [bool; 3],
    pub heads: usize,
    /// Keys and values of RGB stage `i` attend over a map downsampled by
    /// `kv_reduction[i]`; `1` is full attention over every position.
    pub kv_reduction: [usize; 3],
    pub mlp_ratio: usize,
    /// Channel segments in each fusion block.
    pub segments: usize,
    pub decoder_width: usize,
    /// Start the second norm of every thermal residual block at zero scale,
    /// so each block is initially the identity on its input.
    pub zero_init_residual: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [8, 16, 32],
            stage_strides: [2, 2, 2],
            fusion: [true; 3],
            heads: 1,
            kv_reduction: [4, 2, 1],
            mlp_ratio: 2,
            segments: 4,
            decoder_width: 16,
            zero_init_residual: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(CoreError::config("stage channels must be positive"));
        }
        if self.stage_strides.iter().any(|&s| s == 0) {
            return Err(CoreError::config("stage strides must be positive"));
        }
        if self.kv_reduction.iter().any(|&r| r == 0) {
            return Err(CoreError::config("kv_reduction must be positive"));
        }
        if self.heads == 0 || self.mlp_ratio == 0 || self.decoder_width == 0 {
            return Err(CoreError::config(
                "heads, mlp_ratio and decoder_width must be positive",
            ));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c % self.heads != 0 {
                return Err(CoreError::config(format!(
                    "stage {i} width {c} is not divisible by {} heads",
                    self.heads
                )));
            }
            if self.fusion[i] {
                FusionBlockParams::validate(c, c, c, self.segments).map_err(|_| {
                    CoreError::config(format!(
                        "stage {i} width {c} is not divisible by {} fusion segments",
                        self.segments
                    ))
                })?;
            }
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.total_stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(CoreError::config(format!(
                "input {h}×{w} is not divisible by the total stride {s}"
            )));
        }
        let mut div = 1;
        for (i, (&st, &r)) in self.stage_strides.iter().zip(&self.kv_reduction).enumerate() {
            div *= st;
            let (sh, sw) = (h / div, w / div);
            if sh % r != 0 || sw % r != 0 {
                return Err(CoreError::config(format!(
                    "stage {i} map {sh}×{sw} is not divisible by kv_reduction {r}"
                )));
            }
        }
        Ok(())
    }

    /// Scalar parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let conv = |o: usize, i: usize, k: usize| o * i * k * k;
        let mut total = 0;
        let mut prev_t = 1;
        let mut prev_r = 3;
        for (i, &c) in self.stage_channels.iter().enumerate() {
            // thermal: downsample conv + norm, two convs + two norms
            total += conv(c, prev_t, 3) + 2 * c + 2 * (conv(c, c, 3) + 2 * c);
            // rgb: patch embed (+bias) + norm, attention, mlp
            let hidden = c * self.mlp_ratio;
            total += conv(c, prev_r, 3) + c + 2 * c;
            total += 2 * c + 4 * conv(c, c, 1) + c;
            let r = self.kv_reduction[i];
            if r > 1 {
                total += conv(c, c, r) + c + 2 * c;
            }
            total += 2 * c + conv(hidden, c, 1) + hidden + conv(c, hidden, 1) + c;
            if self.fusion[i] {
                total += FusionBlockParams::param_count(c, c, c);
            }
            prev_t = c;
            prev_r = c;
        }
        let d = self.decoder_width;
        total += self.stage_channels.iter().map(|&c| conv(d, c, 1) + d).sum::<usize>();
        total += conv(d, 3 * d, 3) + d + conv(d, d, 3) + d + conv(1, d, 1) + 1;
        total += conv(1, self.stage_channels[2], 1) + 1;
        total
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct ThermalStage {
    down: Conv,
    down_norm: Norm,
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct RgbStage {
    embed: Conv,
    embed_norm: Norm,
    attn_norm: Norm,
    reduce: Option<(Conv, Norm)>,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
    mlp_norm: Norm,
    fc1: Conv,
    fc2: Conv,
}

#[derive(Debug, Clone)]
struct Decoder {
    lateral: [Conv; 3],
    conv1: Conv,
    conv2: Conv,
    head: Conv,
}

/// Probability maps of one forward pass, still on the tape.
#[derive(Clone, Copy)]
pub struct SegVars<'t, T: Real> {
    pub main: Var<'t, T>,
    pub aux: Var<'t, T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub main_prob: SoftMask,
    pub aux_prob: SoftMask,
}

/// Parameter layout of the network. Values live in a separate
/// [`ParamStore`] so the same layout serves `f32` training and `f64`
/// gradient checks.
#[derive(Debug, Clone)]
pub struct Ihbs {
    config: ModelConfig,
    thermal: Vec<ThermalStage>,
    rgb: Vec<RgbStage>,
    fusion: Vec<Option<FusionBlockParams>>,
    decoder: Decoder,
    aux: Conv,
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let w = self.store.add(format!("{name}.w"), init::conv(&mut self.rng, c_out, c_in, k));
        let b = bias.then(|| self.store.add(format!("{name}.b"), Tensor::zeros(&[c_out])));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, c_out: usize, c_in: usize, bias: bool) -> Conv {
        let w = init::pointwise_normal(&mut self.rng, c_out, c_in, TRANSFORMER_STD);
        let w = self.store.add(format!("{name}.w"), w);
        let b = bias.then(|| self.store.add(format!("{name}.b"), Tensor::zeros(&[c_out])));
        Conv {
            w,
            b,
            stride: 1,
            pad: 0,
        }
    }

    fn norm(&mut self, name: &str, c: usize, scale: f64) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.g"), Tensor::full(&[c], T::of(scale))),
            beta: self.store.add(format!("{name}.b"), Tensor::zeros(&[c])),
        }
    }
}

fn apply_conv<'t, T: Real>(b: &Binding<'t, T>, c: &Conv, x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.conv2d(b.var(c.w), c.b.map(|id| b.var(id)), c.stride, c.pad)?)
}

/// Per-channel standardization over spatial positions, then scale/shift.
fn instance_norm<'t, T: Real>(b: &Binding<'t, T>, n: &Norm, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let y = x.reshape(&[s[0], s[1] * s[2]])?.normalize(1, NORM_EPS)?.reshape(&s)?;
    Ok(y.channel_affine(b.var(n.gamma), b.var(n.beta))?)
}

/// Per-position standardization over channels, then scale/shift.
fn layer_norm<'t, T: Real>(b: &Binding<'t, T>, n: &Norm, x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.normalize(0, NORM_EPS)?.channel_affine(b.var(n.gamma), b.var(n.beta))?)
}

impl Ihbs {
    /// Builds the layout and freshly initialized parameters. Identical
    /// configurations give bitwise-identical parameters.
    pub fn new<T: Real>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut bld = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let residual_scale = if config.zero_init_residual { 0.0 } else { 1.0 };
        let mut thermal = Vec::new();
        let mut rgb = Vec::new();
        let mut fusion = Vec::new();
        let (mut prev_t, mut prev_r) = (1, 3);
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let s = config.stage_strides[i];
            let p = format!("thermal.s{i}");
            thermal.push(ThermalStage {
                down: bld.conv(&format!("{p}.down"), c, prev_t, 3, s, false),
                down_norm: bld.norm(&format!("{p}.down_norm"), c, 1.0),
                conv1: bld.conv(&format!("{p}.conv1"), c, c, 3, 1, false),
                norm1: bld.norm(&format!("{p}.norm1"), c, 1.0),
                conv2: bld.conv(&format!("{p}.conv2"), c, c, 3, 1, false),
                norm2: bld.norm(&format!("{p}.norm2"), c, residual_scale),
            });
            let p = format!("rgb.s{i}");
            let hidden = c * config.mlp_ratio;
            rgb.push(RgbStage {
                embed: bld.conv(&format!("{p}.embed"), c, prev_r, 3, s, true),
                embed_norm: bld.norm(&format!("{p}.embed_norm"), c, 1.0),
                attn_norm: bld.norm(&format!("{p}.attn_norm"), c, 1.0),
                reduce: (config.kv_reduction[i] > 1).then(|| {
                    let r = config.kv_reduction[i];
                    let mut conv = bld.conv(&format!("{p}.reduce"), c, c, r, r, true);
                    conv.pad = 0;
                    (conv, bld.norm(&format!("{p}.reduce_norm"), c, 1.0))
                }),
                q: bld.linear(&format!("{p}.q"), c, c, false),
                k: bld.linear(&format!("{p}.k"), c, c, false),
                v: bld.linear(&format!("{p}.v"), c, c, false),
                proj: bld.linear(&format!("{p}.proj"), c, c, true),
                mlp_norm: bld.norm(&format!("{p}.mlp_norm"), c, 1.0),
                fc1: bld.linear(&format!("{p}.fc1"), hidden, c, true),
                fc2: bld.linear(&format!("{p}.fc2"), c, hidden, true),
            });
            fusion.push(if config.fusion[i] {
                Some(FusionBlockParams::register(
                    bld.store,
                    &mut bld.rng,
                    &format!("fusion{i}"),
                    c,
                    c,
                    c,
                    config.segments,
                )?)
            } else {
                None
            });
            prev_t = c;
            prev_r = c;
        }
        let d = config.decoder_width;
        let ch = config.stage_channels;
        let decoder = Decoder {
            lateral: [0, 1, 2].map(|i| bld.conv(&format!("decoder.lateral{i}"), d, ch[i], 1, 1, true)),
            conv1: bld.conv("decoder.conv1", d, 3 * d, 3, 1, true),
            conv2: bld.conv("decoder.conv2", d, d, 3, 1, true),
            head: bld.conv("decoder.head", 1, d, 1, 1, true),
        };
        let aux = bld.conv("aux.head", 1, ch[2], 1, 1, true);
        let model = Ihbs {
            config,
            thermal,
            rgb,
            fusion,
            decoder,
            aux,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Downsample, then one residual block.
    pub fn thermal_stage<'t, T: Real>(
        &self,
        b: &Binding<'t, T>,
        stage: usize,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = &self.thermal[stage];
        let h = instance_norm(b, &s.down_norm, apply_conv(b, &s.down, x)?)?.relu();
        let r = instance_norm(b, &s.norm1, apply_conv(b, &s.conv1, h)?)?.relu();
        let r = instance_norm(b, &s.norm2, apply_conv(b, &s.conv2, r)?)?;
        Ok(h.add(r)?.relu())
    }

    /// Patch embedding, then one transformer block over the flattened map.
    pub fn rgb_stage<'t, T: Real>(
        &self,
        b: &Binding<'t, T>,
        stage: usize,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = &self.rgb[stage];
        let x = layer_norm(b, &s.embed_norm, apply_conv(b, &s.embed, x)?)?;
        let x = x.add(self.self_attention(b, s, layer_norm(b, &s.attn_norm, x)?)?)?;
        let h = apply_conv(b, &s.fc1, layer_norm(b, &s.mlp_norm, x)?)?.relu();
        Ok(x.add(apply_conv(b, &s.fc2, h)?)?)
    }

    fn self_attention<'t, T: Real>(&self, b: &Binding<'t, T>, s: &RgbStage, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (c, n) = (shape[0], shape[1] * shape[2]);
        let heads = self.config.heads;
        let d = c / heads;
        let kv = match &s.reduce {
            Some((conv, norm)) => layer_norm(b, norm, apply_conv(b, conv, x)?)?,
            None => x,
        };
        let m = kv.numel() / c;
        let flat = |conv: &Conv, src: Var<'t, T>, len: usize| -> Result<Vec<Var<'t, T>>> {
            Ok(apply_conv(b, conv, src)?.reshape(&[c, len])?.split(heads)?)
        };
        let (q, k, v) = (flat(&s.q, x, n)?, flat(&s.k, kv, m)?, flat(&s.v, kv, m)?);
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            // scores[key, query], normalized over keys
            let scores = k[h].t()?.matmul(q[h])?.scale(scale).softmax(0)?;
            outs.push(v[h].matmul(scores)?);
        }
        let y = Var::concat(&outs)?.reshape(&shape)?;
        apply_conv(b, &s.proj, y)
    }

    fn check_pair<T: Real>(&self, rgb: Var<'_, T>, thermal: Var<'_, T>) -> Result<(usize, usize)> {
        let (rs, ts) = (rgb.shape(), thermal.shape());
        if rs.len() != 3 || rs[0] != 3 || ts.len() != 3 || ts[0] != 1 || rs[1..] != ts[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                lhs: rs,
                rhs: ts,
            }
            .into());
        }
        self.config.check_input(rs[1], rs[2])?;
        Ok((rs[1], rs[2]))
    }

    /// Three thermal stages without fusion.
    pub fn thermal_encoder<'t, T: Real>(&self, b: &Binding<'t, T>, thermal: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let s = thermal.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(invalid_input("thermal_encoder", &s, "expected 1×H×W"));
        }
        self.config.check_input(s[1], s[2])?;
        let mut x = thermal;
        (0..3)
            .map(|i| {
                x = self.thermal_stage(b, i, x)?;
                Ok(x)
            })
            .collect()
    }

    /// Three RGB stages without fusion.
    pub fn rgb_encoder<'t, T: Real>(&self, b: &Binding<'t, T>, rgb: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let s = rgb.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(invalid_input("rgb_encoder", &s, "expected 3×H×W"));
        }
        self.config.check_input(s[1], s[2])?;
        let mut x = rgb;
        (0..3)
            .map(|i| {
                x = self.rgb_stage(b, i, x)?;
                Ok(x)
            })
            .collect()
    }

    pub fn forward<'t, T: Real>(
        &self,
        b: &Binding<'t, T>,
        rgb: Var<'t, T>,
        thermal: Var<'t, T>,
    ) -> Result<SegVars<'t, T>> {
        let (h, w) = self.check_pair(rgb, thermal)?;
        let (mut f_i, mut f_r) = (thermal, rgb);
        let mut skips = Vec::with_capacity(3);
        for stage in 0..3 {
            f_i = self.thermal_stage(b, stage, f_i)?;
            f_r = self.rgb_stage(b, stage, f_r)?;
            if let Some(p) = &self.fusion[stage] {
                let out = fuse(f_i, f_r, &p.bind(b), p.n)?;
                f_i = out.x_i;
                f_r = out.x_r;
            }
            skips.push(f_r);
        }

        let base = skips[0].shape();
        let (bh, bw) = (base[1], base[2]);
        let lat = skips
            .iter()
            .zip(&self.decoder.lateral)
            .map(|(&f, c)| apply_conv(b, c, f)?.resize_bilinear(bh, bw).map_err(Into::into))
            .collect::<Result<Vec<_>>>()?;
        let y = apply_conv(b, &self.decoder.conv1, Var::concat(&lat)?)?.relu();
        let y = apply_conv(b, &self.decoder.conv2, y)?.relu();
        let main = apply_conv(b, &self.decoder.head, y)?.resize_bilinear(h, w)?.sigmoid();

        let aux = apply_conv(b, &self.aux, f_i)?.resize_bilinear(h, w)?.sigmoid();
        Ok(SegVars { main, aux })
    }

    /// Inference on plain tensors.
    pub fn predict(&self, store: &ParamStore<f32>, rgb: &Tensor<f32>, thermal: &Tensor<f32>) -> Result<SegOutput> {
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let out = self.forward(&b, tape.constant(rgb.clone()), tape.constant(thermal.clone()))?;
        Ok(SegOutput {
            main_prob: SoftMask::new(out.main.value())?,
            aux_prob: SoftMask::new(out.aux.value())?,
        })
    }
}

fn invalid_input(op: &'static str, shape: &[usize], reason: &str) -> CoreError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
    .into()
}
