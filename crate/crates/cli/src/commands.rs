//! The five subcommands. Each writes its resolved configuration before it
//! does any work and reports progress to `log`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use irfusion_core::data::{
    load_gray, load_rgb, load_splits, preprocess, save_gray, save_rgb, synth_corpus, write_dataset, SamplePair, Split,
};
use irfusion_core::fusion::{
    attention_cost_estimate, efficient_attention_profiled, naive_attention_profiled, FusionBlockParams,
};
use irfusion_core::loss::SoftMask;
use irfusion_core::metrics::{Aggregation, MetricsReport};
use irfusion_core::train::{self, evaluate_dataset, load_checkpoint, save_checkpoint, TrainOutcome};
use irfusion_core::CoreError;
use irfusion_tensor::{kernels, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalSplit, RunConfig};
use crate::error::{CliError, Result};

/// Environment variable holding the evaluation thread count.
pub const THREADS_ENV: &str = "IRFUSION_THREADS";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const METRICS_JSON: &str = "metrics.json";
pub const PER_IMAGE_CSV: &str = "per_image.csv";
pub const BENCH_CSV: &str = "bench_attn.csv";

/// Name of the resolved configuration a command writes into its output
/// directory.
pub fn resolved_name(command: &str) -> String {
    format!("{command}.config.txt")
}

/// Thread count from [`THREADS_ENV`], 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
    }
}

fn write_resolved(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(resolved_name(command));
    fs::write(&path, cfg.render()).map_err(|e| CliError::io(&path, e))
}

fn say(log: &mut impl Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| CliError::io("<log>", e))
}

/// 8-connected foreground components of a binary mask.
pub fn count_components(mask: &SoftMask) -> usize {
    let (h, w) = (mask.height(), mask.width());
    let on: Vec<bool> = mask.data().iter().map(|&v| v >= 0.5).collect();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub train: usize,
    pub test: usize,
    /// Mean, min and max foreground fraction per image.
    pub foreground: (f64, f64, f64),
    /// Total, min and max connected crack components per image.
    pub cracks: (usize, usize, usize),
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (mean, lo, hi) = self.foreground;
        let (total, cmin, cmax) = self.cracks;
        write!(
            f,
            "train={} test={} foreground_mean={mean:.4} foreground_min={lo:.4} foreground_max={hi:.4} \
             cracks_total={total} cracks_min={cmin} cracks_max={cmax}",
            self.train, self.test
        )
    }
}

/// Generates `synth.train + synth.test` pairs into `out`. Train samples
/// come first in index order, so growing the test split never changes the
/// training images.
pub fn synth(cfg: &RunConfig, log: &mut impl Write) -> Result<CorpusStats> {
    cfg.synth.validate()?;
    write_resolved(cfg, &cfg.out, "synth")?;
    let samples = synth_corpus(cfg.seed, cfg.synth_train + cfg.synth_test, &cfg.synth, "img")?;
    let fg: Vec<f64> = samples.iter().map(SamplePair::foreground_fraction).collect();
    let cracks: Vec<usize> = samples.iter().map(|s| count_components(&s.mask)).collect();
    let stats = CorpusStats {
        train: cfg.synth_train,
        test: cfg.synth_test,
        foreground: if fg.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                fg.iter().sum::<f64>() / fg.len() as f64,
                fg.iter().cloned().fold(f64::INFINITY, f64::min),
                fg.iter().cloned().fold(0.0, f64::max),
            )
        },
        cracks: (
            cracks.iter().sum(),
            cracks.iter().copied().min().unwrap_or(0),
            cracks.iter().copied().max().unwrap_or(0),
        ),
    };
    let tagged: Vec<(SamplePair, Split)> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, if i < cfg.synth_train { Split::Train } else { Split::Test }))
        .collect();
    write_dataset(&cfg.out, &tagged)?;
    say(log, &stats)?;
    Ok(stats)
}

/// Trains on the train split, validating on the test split, and saves the
/// best-validation checkpoint (the initialization when `epochs = 0`).
pub fn train(cfg: &RunConfig, log: &mut impl Write) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    let mut resolved = cfg.clone();
    resolved.checkpoint = cfg.out.join(CHECKPOINT_FILE);
    write_resolved(&resolved, &cfg.out, "train")?;
    let (train_set, test_set) = load_splits(&cfg.data)?;

    let log_path = cfg.out.join(TRAIN_LOG);
    let mut file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let header = format!("# train={} test={} seed={}", train_set.len(), test_set.len(), cfg.seed);
    say(&mut file, &header)?;
    say(log, &header)?;
    let mut failure = None;
    let outcome = train::train(&cfg.train, &train_set, &test_set, |epoch| {
        if failure.is_none() {
            failure = say(&mut file, epoch).and_then(|_| say(log, epoch)).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    save_checkpoint(&resolved.checkpoint, &outcome.params, &outcome.stats)?;
    let best = match outcome.best_epoch {
        Some(e) => format!(
            "best_epoch={e} best_val_dice={:.6}",
            outcome.history[e - 1].val_dice.unwrap_or(f64::NAN)
        ),
        None => "best_epoch=none".into(),
    };
    say(&mut file, &best)?;
    say(log, &best)?;
    say(log, format!("checkpoint {}", resolved.checkpoint.display()))?;
    say(log, "# resolved config")?;
    write!(log, "{}", resolved.render()).map_err(|e| CliError::io("<log>", e))?;
    Ok(outcome)
}

/// Aggregate evaluation report as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub split: String,
    pub images: usize,
    pub eval_size: usize,
    pub threshold: f32,
    pub aggregation: Aggregation,
    pub main: MetricsReport,
    pub aux: MetricsReport,
}

pub fn per_image_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("stem,dice,iou,accuracy,precision,specificity,recall,cl_dice\n");
    for (stem, r) in rows {
        out.push_str(&format!(
            "{stem},{},{},{},{},{},{},{}\n",
            r.dice, r.iou, r.accuracy, r.precision, r.specificity, r.recall, r.cl_dice
        ));
    }
    out
}

fn select(cfg: &RunConfig) -> Result<Vec<SamplePair>> {
    let (train_set, test_set) = load_splits(&cfg.data)?;
    Ok(match cfg.eval_split {
        EvalSplit::Train => train_set,
        EvalSplit::Test => test_set,
        EvalSplit::All => train_set.into_iter().chain(test_set).collect(),
    })
}

/// Evaluates the checkpoint on the configured split and writes the JSON
/// summary, the per-image CSV and optionally the predicted masks.
pub fn eval(cfg: &RunConfig, threads: usize, log: &mut impl Write) -> Result<EvalSummary> {
    write_resolved(cfg, &cfg.out, "eval")?;
    let (model, store, stats) = load_checkpoint(&cfg.checkpoint, &cfg.train.model)?;
    let samples = select(cfg)?;
    let t = &cfg.train;
    let report = evaluate_dataset(&model, &store, &stats, &samples, t.eval_size, t.threshold, cfg.aggregation, threads)?;
    let summary = EvalSummary {
        checkpoint: cfg.checkpoint.display().to_string(),
        split: cfg.eval_split.to_string(),
        images: samples.len(),
        eval_size: t.eval_size,
        threshold: t.threshold,
        aggregation: cfg.aggregation,
        main: report.aggregate,
        aux: report.aux_aggregate,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let path = cfg.out.join(METRICS_JSON);
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    let path = cfg.out.join(PER_IMAGE_CSV);
    fs::write(&path, per_image_csv(&report.per_image)).map_err(|e| CliError::io(&path, e))?;

    if cfg.save_masks {
        let dir = cfg.out.join("masks");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for s in &samples {
            let p = preprocess(s, t.eval_size, &stats)?;
            let out = model.predict(&store, &p.rgb, &p.thermal)?;
            save_gray(&dir.join(format!("{}.png", s.id)), out.main_prob.binarize(t.threshold).tensor())?;
        }
    }
    let m = &summary.main;
    say(
        log,
        format!(
            "split={} images={} dice={:.6} iou={:.6} accuracy={:.6} precision={:.6} specificity={:.6} recall={:.6} \
             cl_dice={:.6} aux_dice={:.6}",
            summary.split,
            summary.images,
            m.dice,
            m.iou,
            m.accuracy,
            m.precision,
            m.specificity,
            m.recall,
            m.cl_dice,
            summary.aux.dice
        ),
    )?;
    Ok(summary)
}

/// Mask output threshold, matching the metrics default.
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask_path: PathBuf,
    pub overlay_path: PathBuf,
    pub foreground: usize,
    pub skeleton: usize,
}

/// `<dir>/<stem>_overlay.png` next to the mask.
pub fn overlay_path(mask_path: &Path) -> PathBuf {
    let stem = mask_path.file_stem().map_or("mask".into(), |s| s.to_string_lossy().into_owned());
    mask_path.with_file_name(format!("{stem}_overlay.png"))
}

/// Predicts one RGB/thermal pair at `eval.size`, resizes the probability
/// map back to the input resolution and writes the binarized mask plus an
/// overlay: mask pixels red, skeleton pixels green, the rest the input.
pub fn predict(cfg: &RunConfig, rgb_path: &Path, thermal_path: &Path, mask_path: &Path) -> Result<Prediction> {
    let (model, store, stats) = load_checkpoint(&cfg.checkpoint, &cfg.train.model)?;
    let rgb = load_rgb(rgb_path)?;
    let thermal = load_gray(thermal_path)?;
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    if thermal.shape()[1..] != [h, w] {
        return Err(CoreError::from(irfusion_tensor::TensorError::ShapeMismatch {
            op: "predict",
            lhs: rgb.shape().to_vec(),
            rhs: thermal.shape().to_vec(),
        })
        .into());
    }
    let sample = SamplePair::new("input", rgb.clone(), thermal, SoftMask::zeros(h, w))?;
    let size = cfg.train.eval_size;
    let p = preprocess(&sample, size, &stats)?;
    let prob = model.predict(&store, &p.rgb, &p.thermal)?.main_prob.into_tensor();
    let prob = if (h, w) == (size, size) {
        prob
    } else {
        Tensor::new(&[1, h, w], kernels::resize_bilinear(1, size, size, prob.data(), h, w))
            .expect("resized map matches its shape")
    };
    let mask = SoftMask::new(prob.map(|v| v.clamp(0.0, 1.0)))?.binarize(MASK_THRESHOLD);
    let skeleton = mask.skeleton(cfg.train.loss.skeleton_iterations)?;

    let plane = h * w;
    let mut overlay = rgb;
    let data = overlay.data_mut();
    for i in 0..plane {
        let colour = if skeleton.data()[i] >= 0.5 {
            Some([0.0, 1.0, 0.0])
        } else if mask.data()[i] >= 0.5 {
            Some([1.0, 0.0, 0.0])
        } else {
            None
        };
        if let Some(c) = colour {
            for (ch, v) in c.into_iter().enumerate() {
                data[ch * plane + i] = v;
            }
        }
    }
    if let Some(dir) = mask_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let overlay_path = overlay_path(mask_path);
    save_gray(mask_path, mask.tensor())?;
    save_rgb(&overlay_path, &overlay)?;
    let count = |m: &SoftMask| m.data().iter().filter(|&&v| v >= 0.5).count();
    Ok(Prediction {
        mask_path: mask_path.to_path_buf(),
        overlay_path,
        foreground: count(&mask),
        skeleton: count(&skeleton),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub side: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub n: usize,
    pub naive_bytes: u64,
    pub efficient_bytes: u64,
    pub ratio: f64,
    /// Peak auxiliary bytes counted while running the efficient path.
    pub measured_efficient_bytes: Option<u64>,
    /// Peak bytes of the explicit attention maps on the naive path.
    pub measured_naive_bytes: Option<u64>,
    pub efficient_ms: Option<f64>,
    pub naive_ms: Option<f64>,
}

pub const BENCH_HEADER: &str = "h,w,c_k,c_v,n,naive_bytes,efficient_bytes,ratio,naive_gb,efficient_mb,\
measured_efficient_bytes,measured_naive_bytes,efficient_ms,naive_ms";

impl BenchRow {
    pub fn csv(&self) -> String {
        let opt_u = |v: Option<u64>| v.map_or(String::new(), |v| v.to_string());
        let opt_f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.3}"));
        format!(
            "{s},{s},{},{},{},{},{},{:.2},{:.2},{:.2},{},{},{},{}",
            self.c_k,
            self.c_v,
            self.n,
            self.naive_bytes,
            self.efficient_bytes,
            self.ratio,
            self.naive_bytes as f64 / 1e9,
            self.efficient_bytes as f64 / 1e6,
            opt_u(self.measured_efficient_bytes),
            opt_u(self.measured_naive_bytes),
            opt_f(self.efficient_ms),
            opt_f(self.naive_ms),
            s = self.side
        )
    }
}

fn median_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Analytic f32 costs of both attention paths over the size, channel and
/// segment grids, plus measured peaks and timings where the naive map fits.
pub fn bench_attn(cfg: &RunConfig, log: &mut impl Write) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    for &c in &b.channels {
        for &n in &b.segments {
            FusionBlockParams::validate(c, c, c, n)?;
        }
    }
    if b.sizes.contains(&0) {
        return Err(CliError::config("bench.sizes must be positive"));
    }
    write_resolved(cfg, &cfg.out, "bench-attn")?;
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &side in &b.sizes {
        for &c in &b.channels {
            for &n in &b.segments {
                let cost = attention_cost_estimate(side, side, c, c, n, 4);
                let mut row = BenchRow {
                    side,
                    c_k: c,
                    c_v: c,
                    n,
                    naive_bytes: cost.naive_bytes,
                    efficient_bytes: cost.efficient_bytes,
                    ratio: cost.ratio,
                    measured_efficient_bytes: None,
                    measured_naive_bytes: None,
                    efficient_ms: None,
                    naive_ms: None,
                };
                if side <= b.measure_limit {
                    let mut input = || Tensor::<f32>::rand_uniform(&[c, side, side], -1.0, 1.0, &mut rng);
                    let (q, k, v) = (input(), input(), input());
                    let mut peaks = (0, 0);
                    row.efficient_ms = Some(median_ms(b.repeats, || {
                        peaks.0 = efficient_attention_profiled(&q, &k, &v, n)?.1.peak;
                        Ok(())
                    })?);
                    row.naive_ms = Some(median_ms(b.repeats, || {
                        peaks.1 = naive_attention_profiled(&q, &k, &v, n)?.1.peak;
                        Ok(())
                    })?);
                    row.measured_efficient_bytes = Some(peaks.0 as u64 * 4);
                    row.measured_naive_bytes = Some(peaks.1 as u64 * 4);
                }
                rows.push(row);
            }
        }
    }
    let mut csv = format!("{BENCH_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    let path = cfg.out.join(BENCH_CSV);
    fs::write(&path, &csv).map_err(|e| CliError::io(&path, e))?;
    write!(log, "{csv}").map_err(|e| CliError::io("<log>", e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use irfusion_tensor::Tensor;

    #[test]
    fn components_use_eight_connectivity() {
        let m = SoftMask::new(Tensor::new(&[1, 3, 4], vec![1., 0., 0., 1., 0., 1., 0., 1., 0., 0., 0., 0.]).unwrap())
            .unwrap();
        assert_eq!(count_components(&m), 2);
        assert_eq!(count_components(&SoftMask::zeros(4, 4)), 0);
    }

    #[test]
    fn overlay_sits_next_to_the_mask() {
        assert_eq!(overlay_path(Path::new("a/b/m.png")), PathBuf::from("a/b/m_overlay.png"));
    }
}
