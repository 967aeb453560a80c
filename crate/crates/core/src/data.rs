//! Sample triplets, synthetic crack generation, dataset I/O, augmentation
//! and preprocessing.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use irfusion_tensor::kernels;
use irfusion_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::loss::SoftMask;

/// Aligned RGB (`3×H×W`), thermal (`1×H×W`) and binary mask (`1×H×W`).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub mask: SoftMask,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, rgb: Tensor<f32>, thermal: Tensor<f32>, mask: SoftMask) -> Result<Self> {
        let (h, w) = (mask.height(), mask.width());
        if rgb.shape() != [3, h, w] || thermal.shape() != [1, h, w] {
            return Err(CoreError::Data(format!(
                "misaligned sample: rgb {:?}, thermal {:?}, mask {:?}",
                rgb.shape(),
                thermal.shape(),
                mask.tensor().shape()
            )));
        }
        if !mask.is_binary() {
            return Err(CoreError::Data("mask is not binary".into()));
        }
        Ok(SamplePair {
            id: id.into(),
            rgb,
            thermal,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn foreground_fraction(&self) -> f64 {
        let d = self.mask.data();
        d.iter().filter(|&&v| v == 1.0).count() as f64 / d.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub size: usize,
    pub crack_count: (usize, usize),
    /// Standard deviation of the heading change per one-pixel step, radians.
    pub step_jitter: f64,
    /// Walk length as a fraction of the image side.
    pub length: (f64, f64),
    pub branch_probability: f64,
    /// Crack width range in pixels.
    pub width: (f64, f64),
    /// Upper bound on the mask foreground fraction; walks stop once reached.
    pub max_foreground: f64,
    pub texture_amplitude: f64,
    /// Relative darkening of crack pixels in RGB.
    pub crack_darkness: (f64, f64),
    pub thermal_contrast: (f64, f64),
    pub thermal_blur: f64,
    pub rgb_noise: f64,
    pub thermal_noise: f64,
    pub shadows: bool,
    pub watermarks: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 64,
            crack_count: (1, 2),
            step_jitter: 0.12,
            length: (0.5, 1.0),
            branch_probability: 0.3,
            width: (2.0, 4.0),
            max_foreground: 0.075,
            texture_amplitude: 0.08,
            crack_darkness: (0.35, 0.55),
            thermal_contrast: (0.3, 0.45),
            thermal_blur: 1.0,
            rgb_noise: 0.03,
            thermal_noise: 0.04,
            shadows: true,
            watermarks: true,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(CoreError::config("synthetic image size must be at least 32"));
        }
        if self.width.0 < 1.0 || self.width.1 < self.width.0 {
            return Err(CoreError::config("crack width range must start at 1 pixel or more"));
        }
        if self.crack_count.1 < self.crack_count.0 || self.length.1 < self.length.0 {
            return Err(CoreError::config("ranges must be ordered (min, max)"));
        }
        Ok(())
    }
}

/// Seed of sample `index` in a corpus, derived with a splitmix64 step so
/// neighbouring indices get unrelated streams.
pub fn sample_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Stamps a disk of radius `r` centred at `(y, x)` into `mask`.
fn stamp(mask: &mut [f32], size: usize, y: f64, x: f64, r: f64) -> usize {
    let mut added = 0;
    let (y0, y1) = ((y - r).floor().max(0.0) as usize, (y + r).ceil().min(size as f64 - 1.0));
    let (x0, x1) = ((x - r).floor().max(0.0) as usize, (x + r).ceil().min(size as f64 - 1.0));
    if y1 < 0.0 || x1 < 0.0 {
        return 0;
    }
    for py in y0..=y1 as usize {
        for px in x0..=x1 as usize {
            let (dy, dx) = (py as f64 + 0.5 - y, px as f64 + 0.5 - x);
            if dy * dy + dx * dx <= r * r {
                let m = &mut mask[py * size + px];
                if *m == 0.0 {
                    *m = 1.0;
                    added += 1;
                }
            }
        }
    }
    added
}

/// Correlated random walk from `(y, x)` along `heading`, stamping disks.
/// Returns the visited points.
#[allow(clippy::too_many_arguments)]
fn walk(
    rng: &mut ChaCha8Rng,
    mask: &mut [f32],
    filled: &mut usize,
    budget: usize,
    p: &SynthParams,
    (mut y, mut x): (f64, f64),
    mut heading: f64,
    steps: usize,
    radius: f64,
) -> Vec<(f64, f64, f64)> {
    let jitter = Normal::new(0.0, p.step_jitter.max(1e-12)).expect("finite jitter");
    let size = p.size as f64;
    let mut points = Vec::with_capacity(steps);
    for _ in 0..steps {
        if y < 0.0 || x < 0.0 || y >= size || x >= size {
            break;
        }
        if *filled >= budget {
            break;
        }
        *filled += stamp(mask, p.size, y, x, radius);
        points.push((y, x, heading));
        heading += jitter.sample(rng);
        y += heading.sin();
        x += heading.cos();
    }
    points
}

/// Smooth value noise: a coarse random grid bilinearly upsampled.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f32> {
    let grid: Vec<f32> = (0..cells * cells).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    kernels::resize_bilinear(1, cells, cells, &grid, size, size)
}

fn gaussian_blur(src: &[f32], size: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let n = size as isize;
    let pass = |input: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; input.len()];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0f64;
                for (j, &kw) in k.iter().enumerate() {
                    let o = j as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y, (x + o).clamp(0, n - 1))
                    } else {
                        ((y + o).clamp(0, n - 1), x)
                    };
                    acc += kw * input[(sy * n + sx) as usize] as f64;
                }
                out[(y * n + x) as usize] = acc as f32;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Multiplicative darkening `1 − depth·profile` with a soft-edged profile.
fn soft_edge(d: f64, half_width: f64, softness: f64) -> f64 {
    let t = ((half_width - d.abs()) / softness).clamp(-1.0, 1.0);
    0.5 + 0.5 * t
}

/// One synthetic RGB-thermal crack triplet, fully determined by `seed`.
pub fn synth_generate(seed: u64, params: &SynthParams) -> Result<SamplePair> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = params;
    let n = p.size;
    let sf = n as f64;
    let budget = (p.max_foreground * (n * n) as f64) as usize;

    let mut mask = vec![0.0f32; n * n];
    let mut filled = 0usize;
    let cracks = rng.random_range(p.crack_count.0..=p.crack_count.1);
    for _ in 0..cracks {
        let radius = uniform(&mut rng, p.width) / 2.0;
        let start = (
            rng.random_range(0.25 * sf..0.75 * sf),
            rng.random_range(0.25 * sf..0.75 * sf),
        );
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let half = (uniform(&mut rng, p.length) * sf / 2.0) as usize;
        let mut trunk = walk(&mut rng, &mut mask, &mut filled, budget, p, start, heading, half, radius);
        let back = walk(
            &mut rng,
            &mut mask,
            &mut filled,
            budget,
            p,
            start,
            heading + std::f64::consts::PI,
            half,
            radius,
        );
        trunk.extend(back);
        if !trunk.is_empty() && rng.random_bool(p.branch_probability.clamp(0.0, 1.0)) {
            let (y, x, h) = trunk[rng.random_range(0..trunk.len())];
            let turn = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.6..1.2);
            let steps = (uniform(&mut rng, p.length) * sf / 3.0) as usize;
            walk(&mut rng, &mut mask, &mut filled, budget, p, (y, x), h + turn, steps, radius * 0.75);
        }
    }

    // RGB: textured gray surface, darkened cracks, distractors, noise.
    let base = rng.random_range(0.45..0.6);
    let coarse = value_noise(&mut rng, n, 8);
    let fine = value_noise(&mut rng, n, 24);
    let darkness = uniform(&mut rng, p.crack_darkness);
    let mut shade = vec![1.0f64; n * n];
    if p.shadows && rng.random_bool(0.5) {
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let offset = rng.random_range(0.2 * sf..0.8 * sf);
        let half_width = rng.random_range(4.0..10.0);
        let depth = rng.random_range(0.15..0.3);
        let (s, c) = angle.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let d = (y as f64 - sf / 2.0) * c - (x as f64 - sf / 2.0) * s + sf / 2.0 - offset;
                shade[y * n + x] *= 1.0 - depth * soft_edge(d, half_width, 2.0);
            }
        }
    }
    if p.watermarks && rng.random_bool(0.5) {
        let (cy, cx) = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
        let (ry, rx) = (rng.random_range(4.0..12.0), rng.random_range(4.0..12.0));
        let depth = rng.random_range(0.1..0.25);
        for y in 0..n {
            for x in 0..n {
                let d = (((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2)).sqrt();
                shade[y * n + x] *= 1.0 - depth * soft_edge(d - 1.0, 0.0, 0.3);
            }
        }
    }
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let rgb_noise = Normal::new(0.0, p.rgb_noise.max(1e-12)).expect("finite noise");
    let mut rgb = vec![0.0f32; 3 * n * n];
    for ch in 0..3 {
        for i in 0..n * n {
            let texture = p.texture_amplitude * (0.6 * coarse[i] as f64 + 0.4 * fine[i] as f64);
            let mut v = (base + tint[ch] + texture) * shade[i];
            if mask[i] == 1.0 {
                v *= 1.0 - darkness;
            }
            v += rgb_noise.sample(&mut rng);
            rgb[ch * n * n + i] = v.clamp(0.0, 1.0) as f32;
        }
    }

    // Thermal: blurred crack signal over a smooth gradient, no distractors.
    let level = rng.random_range(0.3..0.45);
    let slope = rng.random_range(0.0..0.15);
    let (gs, gc) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
    let contrast = uniform(&mut rng, p.thermal_contrast);
    let blurred = gaussian_blur(&mask, n, p.thermal_blur);
    let th_noise = Normal::new(0.0, p.thermal_noise.max(1e-12)).expect("finite noise");
    let thermal: Vec<f32> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 / sf, (i % n) as f64 / sf);
            let v = level + slope * (x * gc + y * gs) + contrast * blurred[i] as f64 + th_noise.sample(&mut rng);
            v.clamp(0.0, 1.0) as f32
        })
        .collect();

    SamplePair::new(
        format!("synth_{seed:016x}"),
        Tensor::new(&[3, n, n], rgb)?,
        Tensor::new(&[1, n, n], thermal)?,
        SoftMask::new(Tensor::new(&[1, n, n], mask)?)?,
    )
}

/// `count` samples of a corpus; sample `i` uses [`sample_seed`]`(seed, i)`.
pub fn synth_corpus(seed: u64, count: usize, params: &SynthParams, prefix: &str) -> Result<Vec<SamplePair>> {
    (0..count)
        .map(|i| {
            let mut s = synth_generate(sample_seed(seed, i as u64), params)?;
            s.id = format!("{prefix}{i:04}");
            Ok(s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

const SPLIT_FILE: &str = "split.txt";
const SUBDIRS: [&str; 3] = ["rgb", "thermal", "mask"];
const EXTENSIONS: [&str; 3] = ["png", "pgm", "ppm"];

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(path: &Path, img: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    img(path).map_err(|source| CoreError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(t.data()[y as usize * w + x as usize])])
    });
    save(path, |p| img.save(p))
}

pub fn save_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(t.data()[i]), to_u8(t.data()[plane + i]), to_u8(t.data()[2 * plane + i])])
    });
    save(path, |p| img.save(p))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => CoreError::io(path, e),
        source => CoreError::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// `3×H×W` in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// `1×H×W` in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f32 / 255.0).collect();
    Ok(Tensor::new(&[1, h, w], data)?)
}

/// Writes samples into `root/{rgb,thermal,mask}/<id>.png` plus the split
/// manifest.
pub fn write_dataset(root: &Path, samples: &[(SamplePair, Split)]) -> Result<()> {
    for d in SUBDIRS {
        let dir = root.join(d);
        fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    }
    let mut manifest = String::new();
    for (s, split) in samples {
        save_rgb(&root.join("rgb").join(format!("{}.png", s.id)), &s.rgb)?;
        save_gray(&root.join("thermal").join(format!("{}.png", s.id)), &s.thermal)?;
        save_gray(&root.join("mask").join(format!("{}.png", s.id)), s.mask.tensor())?;
        manifest.push_str(&format!("{} {split}\n", s.id));
    }
    let path = root.join(SPLIT_FILE);
    fs::write(&path, manifest).map_err(|e| CoreError::io(&path, e))
}

/// Image stems in `dir`, mapped to their file paths.
fn stems(dir: &Path) -> Result<std::collections::BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CoreError::Data(format!("missing image directory {}", dir.display())),
        _ => CoreError::io(dir, e),
    })?;
    let mut out = std::collections::BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CoreError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Loads every triplet under `root`, in lexicographic stem order. Masks
/// are binarized at 0.5.
pub fn load_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let [rgb, thermal, mask] = SUBDIRS.map(|d| stems(&root.join(d)));
    let (rgb, thermal, mask) = (rgb?, thermal?, mask?);
    let all: BTreeSet<&String> = rgb.keys().chain(thermal.keys()).chain(mask.keys()).collect();
    let mut missing = Vec::new();
    for stem in &all {
        let absent: Vec<&str> = [("rgb", &rgb), ("thermal", &thermal), ("mask", &mask)]
            .iter()
            .filter(|(_, m)| !m.contains_key(*stem))
            .map(|(d, _)| *d)
            .collect();
        if !absent.is_empty() {
            missing.push(format!("{stem} (missing in {})", absent.join(", ")));
        }
    }
    if !missing.is_empty() {
        return Err(CoreError::Data(format!("unmatched stems: {}", missing.join("; "))));
    }
    all.into_iter()
        .map(|stem| {
            let m = load_gray(&mask[stem])?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            SamplePair::new(
                stem.clone(),
                load_rgb(&rgb[stem])?,
                load_gray(&thermal[stem])?,
                SoftMask::new(m)?,
            )
            .map_err(|e| CoreError::Data(format!("{stem}: {e}")))
        })
        .collect()
}

/// Parses `root/split.txt` (`<stem> train|test` per line).
pub fn read_split(root: &Path) -> Result<Vec<(String, Split)>> {
    let path = root.join(SPLIT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CoreError::Data(format!("no dataset at {}: missing {SPLIT_FILE}", root.display())),
        _ => CoreError::io(&path, e),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut parts = line.split_whitespace();
            let (Some(stem), Some(kind), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(CoreError::Data(format!("{}:{}: expected `<stem> train|test`", path.display(), i + 1)));
            };
            let split = match kind {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(CoreError::Data(format!(
                        "{}:{}: unknown split `{other}`",
                        path.display(),
                        i + 1
                    )))
                }
            };
            Ok((stem.to_string(), split))
        })
        .collect()
}

/// Loads the dataset and partitions it by the split manifest. Stems absent
/// from the manifest are ignored.
pub fn load_splits(root: &Path) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    let manifest = read_split(root)?;
    let mut samples: std::collections::BTreeMap<String, SamplePair> =
        load_dataset(root)?.into_iter().map(|s| (s.id.clone(), s)).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (stem, split) in manifest {
        let s = samples
            .remove(&stem)
            .ok_or_else(|| CoreError::Data(format!("split manifest names unknown stem `{stem}`")))?;
        match split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

fn flip_tensor(t: &Tensor<f32>, axis: FlipAxis) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    Tensor::from_fn(s, |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = match axis {
            FlipAxis::Horizontal => (y, w - 1 - x),
            FlipAxis::Vertical => (h - 1 - y, x),
        };
        t.data()[c * h * w + sy * w + sx]
    })
}

/// Mirrors all three tensors of a sample identically.
pub fn flip(sample: &SamplePair, axis: FlipAxis) -> SamplePair {
    SamplePair {
        id: sample.id.clone(),
        rgb: flip_tensor(&sample.rgb, axis),
        thermal: flip_tensor(&sample.thermal, axis),
        mask: SoftMask::new(flip_tensor(sample.mask.tensor(), axis)).expect("flip keeps mask values"),
    }
}

/// `(v − 0.5)·contrast + 0.5 + brightness`, without clamping.
pub fn adjust_brightness_contrast(t: &Tensor<f32>, brightness: f32, contrast: f32) -> Tensor<f32> {
    t.map(|v| (v - 0.5) * contrast + 0.5 + brightness)
}

fn resize_nearest(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
        t.data()[ch * h * w + sy * w + sx]
    })
}

fn resize_linear(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = t.shape();
    let data = kernels::resize_bilinear(s[0], s[1], s[2], t.data(), oh, ow);
    Tensor::new(&[s[0], oh, ow], data).expect("resize output matches its shape")
}

/// Bilinear resize of the images, nearest-neighbour resize of the mask.
pub fn resize_sample(sample: &SamplePair, size: usize) -> SamplePair {
    if sample.height() == size && sample.width() == size {
        return sample.clone();
    }
    SamplePair {
        id: sample.id.clone(),
        rgb: resize_linear(&sample.rgb, size, size),
        thermal: resize_linear(&sample.thermal, size, size),
        mask: SoftMask::new(resize_nearest(sample.mask.tensor(), size, size)).expect("nearest keeps mask values"),
    }
}

/// Random flips of the whole triplet and brightness/contrast jitter of the
/// RGB image only, at `train_size`.
pub fn augment(sample: &SamplePair, seed: u64, train_size: usize) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = resize_sample(sample, train_size);
    if rng.random_bool(0.5) {
        s = flip(&s, FlipAxis::Horizontal);
    }
    if rng.random_bool(0.5) {
        s = flip(&s, FlipAxis::Vertical);
    }
    let brightness = rng.random_range(-0.1f32..0.1);
    let contrast = rng.random_range(0.8f32..1.2);
    s.rgb = adjust_brightness_contrast(&s.rgb, brightness, contrast).map(|v| v.clamp(0.0, 1.0));
    s
}

/// Per-channel mean and standard deviation of RGB and thermal values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub rgb_mean: [f64; 3],
    pub rgb_std: [f64; 3],
    pub thermal_mean: f64,
    pub thermal_std: f64,
}

impl Default for ChannelStats {
    /// The identity standardization.
    fn default() -> Self {
        ChannelStats {
            rgb_mean: [0.0; 3],
            rgb_std: [1.0; 3],
            thermal_mean: 0.0,
            thermal_std: 1.0,
        }
    }
}

fn mean_std(values: impl Iterator<Item = f32> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for v in values.clone() {
        n += 1;
        sum += v as f64;
    }
    let mean = sum / n.max(1) as f64;
    let var = values.map(|v| (v as f64 - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    (mean, var.sqrt().max(1e-6))
}

impl ChannelStats {
    pub fn fit(samples: &[SamplePair]) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::Usage("cannot fit channel statistics on zero samples".into()));
        }
        let channel = |c: usize| {
            samples.iter().flat_map(move |s| {
                let plane = s.height() * s.width();
                s.rgb.data()[c * plane..(c + 1) * plane].iter().copied()
            })
        };
        let [(m0, s0), (m1, s1), (m2, s2)] = [0, 1, 2].map(|c| mean_std(channel(c)));
        let (tm, ts) = mean_std(samples.iter().flat_map(|s| s.thermal.data().iter().copied()));
        Ok(ChannelStats {
            rgb_mean: [m0, m1, m2],
            rgb_std: [s0, s1, s2],
            thermal_mean: tm,
            thermal_std: ts,
        })
    }

    pub fn apply_rgb(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let plane = t.numel() / 3;
        Tensor::from_fn(t.shape(), |i| {
            let c = i / plane;
            ((t.data()[i] as f64 - self.rgb_mean[c]) / self.rgb_std[c]) as f32
        })
    }

    pub fn apply_thermal(&self, t: &Tensor<f32>) -> Tensor<f32> {
        t.map(|v| ((v as f64 - self.thermal_mean) / self.thermal_std) as f32)
    }
}

/// Resize to `eval_size` and standardize the images with `stats`. The
/// returned RGB and thermal tensors are model inputs, no longer in `[0, 1]`.
pub fn preprocess(sample: &SamplePair, eval_size: usize, stats: &ChannelStats) -> Result<SamplePair> {
    if eval_size < 32 {
        return Err(CoreError::config("eval_size must be at least 32"));
    }
    let s = resize_sample(sample, eval_size);
    Ok(SamplePair {
        rgb: stats.apply_rgb(&s.rgb),
        thermal: stats.apply_thermal(&s.thermal),
        ..s
    })
}
