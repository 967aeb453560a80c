//! Optimization loop, dataset evaluation and checkpoints.

use std::fs;
use std::path::Path;

use irfusion_tensor::{checkpoint, AdamW, AdamWConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, preprocess, sample_seed, ChannelStats, SamplePair};
use crate::error::{CoreError, Result};
use crate::loss::{composite_loss, LossWeights};
use crate::metrics::{aggregate, confusion, evaluate, Aggregation, Confusion, MetricsReport};
use crate::model::{Ihbs, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub threshold: f32,
    /// Stop after the first epoch whose validation Dice reaches this value.
    pub target_val_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            batch_size: 8,
            epochs: 50,
            train_size: 64,
            eval_size: 64,
            seed: 0,
            augment: true,
            threshold: 0.5,
            target_val_dice: None,
        }
    }
}

impl TrainConfig {
    /// Batch 8, 150 epochs, weight decay 1e-4 and 480×480 inputs.
    pub fn paper_protocol() -> Self {
        let mut c = TrainConfig {
            epochs: 150,
            train_size: 480,
            eval_size: 480,
            ..TrainConfig::default()
        };
        c.optimizer.weight_decay = 1e-4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(CoreError::config("batch_size must be at least 1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(CoreError::config("optimizer needs lr > 0, weight_decay ≥ 0 and betas in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CoreError::config("threshold must lie in [0, 1]"));
        }
        for (name, size) in [("train_size", self.train_size), ("eval_size", self.eval_size)] {
            if size < 32 {
                return Err(CoreError::config(format!("{name} must be at least 32")));
            }
            self.model
                .check_input(size, size)
                .map_err(|e| match e {
                    CoreError::Config(m) => CoreError::config(format!("{name} = {size}: {m}")),
                    other => other,
                })?;
        }
        Ok(())
    }
}

/// Mean loss components over one epoch, plus validation Dice of both heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    pub topology: f64,
    pub ce: f64,
    pub dice: f64,
    pub val_dice: Option<f64>,
    pub val_aux_dice: Option<f64>,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "epoch={} total={:.6} main={:.6} aux={:.6} topology={:.6} ce={:.6} dice={:.6} val_dice={} val_aux_dice={}",
            self.epoch,
            self.total,
            self.main,
            self.aux,
            self.topology,
            self.ce,
            self.dice,
            opt(self.val_dice),
            opt(self.val_aux_dice)
        )
    }
}

/// Summed loss components of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub samples: usize,
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    pub topology: f64,
    pub ce: f64,
    pub dice: f64,
}

impl BatchLoss {
    fn add(&mut self, o: &BatchLoss) {
        self.samples += o.samples;
        self.total += o.total;
        self.main += o.main;
        self.aux += o.aux;
        self.topology += o.topology;
        self.ce += o.ce;
        self.dice += o.dice;
    }
}

/// Runs forward and backward for every (already preprocessed) sample of a
/// batch, adding the gradients of the batch-mean loss into `store` in
/// sample order. Parameters the loss never reaches get a zero gradient.
pub fn accumulate_batch(
    model: &Ihbs,
    store: &mut ParamStore<f32>,
    batch: &[SamplePair],
    weights: &LossWeights,
) -> Result<BatchLoss> {
    let mut sums = BatchLoss::default();
    let scale = 1.0 / batch.len().max(1) as f64;
    for s in batch {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let out = model.forward(&b, tape.constant(s.rgb.clone()), tape.constant(s.thermal.clone()))?;
        let label = tape.constant(s.mask.tensor().clone());
        let loss = composite_loss(label, out.main, out.aux, weights)?;
        loss.total.scale(scale).backward()?;
        store.accumulate(&b);
        let item = |v: irfusion_tensor::Var<'_, f32>| v.item() as f64;
        sums.add(&BatchLoss {
            samples: 1,
            total: item(loss.total),
            main: item(loss.main.weighted),
            aux: item(loss.aux.weighted),
            topology: item(loss.main.topology),
            ce: item(loss.main.ce),
            dice: item(loss.main.dice),
        });
    }
    store.fill_missing_grads();
    Ok(sums)
}

pub struct TrainOutcome {
    pub model: Ihbs,
    /// Parameters of the best validation epoch, or of the last epoch when
    /// there is no validation data.
    pub params: ParamStore<f32>,
    pub stats: ChannelStats,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Standardization statistics at `f32` precision, so values written to a
/// checkpoint reproduce training exactly.
fn stats_for(train: &[SamplePair]) -> Result<ChannelStats> {
    let r = |v: f64| v as f32 as f64;
    let s = ChannelStats::fit(train)?;
    Ok(ChannelStats {
        rgb_mean: s.rgb_mean.map(r),
        rgb_std: s.rgb_std.map(r),
        thermal_mean: r(s.thermal_mean),
        thermal_std: r(s.thermal_std),
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    sample_seed(seed ^ 0xA076_1D64_78BD_642F, epoch as u64)
}

/// Trains from the initialization given by `cfg.model.seed`. `on_epoch` is
/// called after every epoch.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (model, mut store) = Ihbs::new::<f32>(cfg.model.clone())?;
    let stats = if train_set.is_empty() {
        ChannelStats::default()
    } else {
        stats_for(train_set)?
    };
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(CoreError::Usage("training split is empty".into()));
    }
    let mut optimizer = AdamW::new(cfg.optimizer, &store);
    let val: Vec<SamplePair> = val_set
        .iter()
        .map(|s| preprocess(s, cfg.eval_size, &stats))
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let seed = epoch_seed(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut sums = BatchLoss::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let s = if cfg.augment {
                        augment(s, sample_seed(seed, i as u64), cfg.train_size)
                    } else {
                        s.clone()
                    };
                    preprocess(&s, cfg.train_size, &stats)
                })
                .collect::<Result<Vec<_>>>()?;
            store.zero_grad();
            sums.add(&accumulate_batch(&model, &mut store, &batch, &cfg.loss)?);
            optimizer.step(&mut store)?;
        }
        let n = sums.samples.max(1) as f64;
        let (val_dice, val_aux_dice) = if val.is_empty() {
            (None, None)
        } else {
            let (m, a) = validation_dice(&model, &store, &val, cfg.threshold)?;
            (Some(m), Some(a))
        };
        let log = EpochLog {
            epoch,
            total: sums.total / n,
            main: sums.main / n,
            aux: sums.aux / n,
            topology: sums.topology / n,
            ce: sums.ce / n,
            dice: sums.dice / n,
            val_dice,
            val_aux_dice,
        };
        on_epoch(&log);
        history.push(log);
        if let Some(v) = val_dice {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, store.clone()));
            }
            if cfg.target_val_dice.is_some_and(|t| v >= t) {
                break;
            }
        }
    }
    let (mut params, best_epoch) = match best {
        Some((_, epoch, params)) => (params, Some(epoch)),
        None => (store, None),
    };
    params.zero_grad();
    Ok(TrainOutcome {
        model,
        params,
        stats,
        history,
        best_epoch,
    })
}

/// Micro Dice of the main and aux heads over preprocessed samples.
fn validation_dice(model: &Ihbs, store: &ParamStore<f32>, val: &[SamplePair], threshold: f32) -> Result<(f64, f64)> {
    let (mut main, mut aux) = (Confusion::default(), Confusion::default());
    for s in val {
        let out = model.predict(store, &s.rgb, &s.thermal)?;
        main.add(&confusion(&out.main_prob, &s.mask, threshold)?);
        aux.add(&confusion(&out.aux_prob, &s.mask, threshold)?);
    }
    Ok((main.dice(), aux.dice()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
    /// Aggregate of the auxiliary head.
    pub aux_aggregate: MetricsReport,
}

/// Metrics of both heads on every sample, computed at `eval_size`. Images
/// are split into contiguous runs over `threads` workers and merged back in
/// input order, so the report does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset(
    model: &Ihbs,
    store: &ParamStore<f32>,
    stats: &ChannelStats,
    samples: &[SamplePair],
    eval_size: usize,
    threshold: f32,
    mode: Aggregation,
    threads: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(CoreError::Usage("no samples to evaluate".into()));
    }
    model.config().check_input(eval_size, eval_size)?;
    let one = |s: &SamplePair| -> Result<(MetricsReport, MetricsReport)> {
        let p = preprocess(s, eval_size, stats)?;
        let out = model.predict(store, &p.rgb, &p.thermal)?;
        Ok((
            evaluate(&out.main_prob, &p.mask, threshold)?,
            evaluate(&out.aux_prob, &p.mask, threshold)?,
        ))
    };
    let chunk = samples.len().div_ceil(threads.clamp(1, samples.len()));
    let results: Vec<(MetricsReport, MetricsReport)> = std::thread::scope(|scope| {
        let workers: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.0).collect();
    let aux_reports: Vec<MetricsReport> = results.iter().map(|r| r.1).collect();
    Ok(EvalReport {
        aggregate: aggregate(&reports, mode)?,
        aux_aggregate: aggregate(&aux_reports, mode)?,
        per_image: samples.iter().map(|s| s.id.clone()).zip(reports).collect(),
    })
}

const STATS_RGB_MEAN: &str = "data.rgb_mean";
const STATS_RGB_STD: &str = "data.rgb_std";
const STATS_THERMAL: &str = "data.thermal_mean_std";

/// Parameters followed by the standardization statistics, in the binary
/// checkpoint format.
pub fn checkpoint_bytes(store: &ParamStore<f32>, stats: &ChannelStats) -> Vec<u8> {
    let mut entries = store.export();
    let t = |v: Vec<f32>| Tensor::new(&[v.len()], v).expect("1-d stats tensor");
    entries.push((STATS_RGB_MEAN.into(), t(stats.rgb_mean.iter().map(|&v| v as f32).collect())));
    entries.push((STATS_RGB_STD.into(), t(stats.rgb_std.iter().map(|&v| v as f32).collect())));
    entries.push((
        STATS_THERMAL.into(),
        t(vec![stats.thermal_mean as f32, stats.thermal_std as f32]),
    ));
    checkpoint::to_bytes(&entries)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, stats: &ChannelStats) -> Result<()> {
    fs::write(path, checkpoint_bytes(store, stats)).map_err(|e| CoreError::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`] into a fresh store of
/// `config`'s layout. A layout mismatch names the first differing parameter.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<(Ihbs, ParamStore<f32>, ChannelStats)> {
    let file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut entries = checkpoint::read(std::io::BufReader::new(file))?;
    let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
        let pos = entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CoreError::Data(format!("checkpoint lacks `{name}`")))?;
        let (_, t) = entries.remove(pos);
        if t.numel() != len {
            return Err(CoreError::Data(format!("checkpoint entry `{name}` has {} values, expected {len}", t.numel())));
        }
        Ok(t.data().iter().map(|&v| v as f64).collect())
    };
    let mean = take(STATS_RGB_MEAN, 3)?;
    let std = take(STATS_RGB_STD, 3)?;
    let thermal = take(STATS_THERMAL, 2)?;
    let stats = ChannelStats {
        rgb_mean: [mean[0], mean[1], mean[2]],
        rgb_std: [std[0], std[1], std[2]],
        thermal_mean: thermal[0],
        thermal_std: thermal[1],
    };
    let (model, mut store) = Ihbs::new::<f32>(config.clone())?;
    store.load_values(&entries)?;
    Ok((model, store, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthParams};

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                stage_channels: [4, 8, 8],
                decoder_width: 4,
                ..ModelConfig::default()
            },
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let cfg = TrainConfig { epochs: 0, ..tiny() };
        let out = train(&cfg, &[], &[], |_| {}).unwrap();
        let (_, init) = Ihbs::new::<f32>(cfg.model.clone()).unwrap();
        assert_eq!(out.params.export(), init.export());
        assert!(out.history.is_empty());
    }

    #[test]
    fn incompatible_size_fails_before_training() {
        let cfg = TrainConfig {
            train_size: 36,
            ..tiny()
        };
        assert!(matches!(train(&cfg, &[], &[], |_| {}), Err(CoreError::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let data = synth_corpus(1, 4, &SynthParams::default(), "s").unwrap();
        let out = train(&cfg, &data[..2], &data[2..], |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &out.params, &out.stats).unwrap();
        let (_, store, stats) = load_checkpoint(&path, &cfg.model).unwrap();
        assert_eq!(store.export(), out.params.export());
        assert_eq!(stats, out.stats);
        let other = ModelConfig {
            stage_channels: [8, 8, 8],
            ..cfg.model.clone()
        };
        assert!(load_checkpoint(&path, &other).is_err());
    }

    #[test]
    fn evaluation_report_ignores_the_thread_count() {
        let cfg = tiny();
        let data = synth_corpus(2, 5, &SynthParams::default(), "e").unwrap();
        let (model, store) = Ihbs::new::<f32>(cfg.model.clone()).unwrap();
        let stats = ChannelStats::fit(&data).unwrap();
        let run = |threads| evaluate_dataset(&model, &store, &stats, &data, 64, 0.5, Aggregation::Micro, threads).unwrap();
        let one = run(1);
        assert_eq!(one.per_image.len(), 5);
        for threads in [2, 3, 8] {
            assert_eq!(run(threads), one);
        }
        assert!(matches!(
            evaluate_dataset(&model, &store, &stats, &[], 64, 0.5, Aggregation::Micro, 1),
            Err(CoreError::Usage(_))
        ));
    }
}
