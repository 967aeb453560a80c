//! Flat `key = value` run configuration.
//!
//! Resolution order is defaults, then a preset, then a config file, then
//! command-line overrides. [`RunConfig::render`] lists every key with its
//! resolved value and parses back to the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use irfusion_core::data::SynthParams;
use irfusion_core::metrics::Aggregation;
use irfusion_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 200 train and 40 test images at 64×64, 50 epochs.
    Desk,
    /// Batch 8, 150 epochs, weight decay 1e-4, 480×480 inputs.
    PaperProtocol,
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-protocol" => Ok(Preset::PaperProtocol),
            _ => Err(CliError::config(format!("unknown preset `{s}` (expected desk or paper-protocol)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

impl FromStr for EvalSplit {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            "all" => Ok(EvalSplit::All),
            _ => Err(CliError::config(format!("unknown split `{s}` (expected train, test or all)"))),
        }
    }
}

impl Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
            EvalSplit::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub channels: Vec<usize>,
    pub segments: Vec<usize>,
    /// Largest side at which both paths are run and timed.
    pub measure_limit: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![1, 8, 16, 32, 64, 128, 256],
            channels: vec![64],
            segments: vec![4],
            measure_limit: 64,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth: SynthParams,
    pub train: TrainConfig,
    pub eval_split: EvalSplit,
    pub aggregation: Aggregation,
    pub save_masks: bool,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("out/model.ckpt"),
            synth_train: 200,
            synth_test: 40,
            synth: SynthParams::default(),
            train: TrainConfig::default(),
            eval_split: EvalSplit::Test,
            aggregation: Aggregation::Micro,
            save_masks: false,
            bench: BenchConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v)?;
    items
        .try_into()
        .map_err(|_| CliError::config(format!("`{key}`: expected {N} comma-separated values, got `{v}`")))
}

fn parse_pair<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)> {
    let [a, b] = parse_array(key, v)?;
    Ok((a, b))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig::default(),
            Preset::PaperProtocol => RunConfig {
                train: TrainConfig {
                    seed: 0,
                    ..TrainConfig::paper_protocol()
                },
                ..RunConfig::default()
            },
        }
    }

    /// Sets one key. `seed` drives synthesis, initialization and the
    /// training order together.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut t.model;
        let s = &mut self.synth;
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                t.seed = self.seed;
                m.seed = self.seed;
            }
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),

            "synth.train" => self.synth_train = parse(key, v)?,
            "synth.test" => self.synth_test = parse(key, v)?,
            "synth.size" => s.size = parse(key, v)?,
            "synth.crack_count" => s.crack_count = parse_pair(key, v)?,
            "synth.step_jitter" => s.step_jitter = parse(key, v)?,
            "synth.length" => s.length = parse_pair(key, v)?,
            "synth.branch_probability" => s.branch_probability = parse(key, v)?,
            "synth.width" => s.width = parse_pair(key, v)?,
            "synth.max_foreground" => s.max_foreground = parse(key, v)?,
            "synth.texture_amplitude" => s.texture_amplitude = parse(key, v)?,
            "synth.crack_darkness" => s.crack_darkness = parse_pair(key, v)?,
            "synth.thermal_contrast" => s.thermal_contrast = parse_pair(key, v)?,
            "synth.thermal_blur" => s.thermal_blur = parse(key, v)?,
            "synth.rgb_noise" => s.rgb_noise = parse(key, v)?,
            "synth.thermal_noise" => s.thermal_noise = parse(key, v)?,
            "synth.shadows" => s.shadows = parse_bool(key, v)?,
            "synth.watermarks" => s.watermarks = parse_bool(key, v)?,

            "model.stage_channels" => m.stage_channels = parse_array(key, v)?,
            "model.stage_strides" => m.stage_strides = parse_array(key, v)?,
            "model.fusion" => {
                let flags: [u8; 3] = parse_array(key, v)?;
                if flags.iter().any(|&f| f > 1) {
                    return Err(CliError::config(format!("`{key}`: expected three 0/1 flags, got `{v}`")));
                }
                m.fusion = flags.map(|f| f == 1);
            }
            "model.heads" => m.heads = parse(key, v)?,
            "model.kv_reduction" => m.kv_reduction = parse_array(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.segments" => m.segments = parse(key, v)?,
            "model.decoder_width" => m.decoder_width = parse(key, v)?,
            "model.zero_init_residual" => m.zero_init_residual = parse_bool(key, v)?,

            "loss.alpha" => t.loss.alpha = parse(key, v)?,
            "loss.beta" => t.loss.beta = parse(key, v)?,
            "loss.gamma" => t.loss.gamma = parse(key, v)?,
            "loss.delta" => t.loss.delta = parse(key, v)?,
            "loss.skeleton_iterations" => t.loss.skeleton_iterations = parse(key, v)?,
            "loss.eps" => t.loss.eps = parse(key, v)?,

            "optim.lr" => t.optimizer.lr = parse(key, v)?,
            "optim.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "optim.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "optim.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "optim.eps" => t.optimizer.eps = parse(key, v)?,

            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.size" => t.train_size = parse(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.target_val_dice" => {
                t.target_val_dice = if v == "none" { None } else { Some(parse(key, v)?) }
            }

            "eval.size" => t.eval_size = parse(key, v)?,
            "eval.threshold" => t.threshold = parse(key, v)?,
            "eval.split" => self.eval_split = v.parse()?,
            "eval.aggregation" => self.aggregation = v.parse().map_err(|e| CliError::config(format!("{e}")))?,
            "eval.save_masks" => self.save_masks = parse_bool(key, v)?,

            "bench.sizes" => self.bench.sizes = parse_list(key, v)?,
            "bench.channels" => self.bench.channels = parse_list(key, v)?,
            "bench.segments" => self.bench.segments = parse_list(key, v)?,
            "bench.measure_limit" => self.bench.measure_limit = parse(key, v)?,
            "bench.repeats" => self.bench.repeats = parse(key, v)?,

            _ => return Err(CliError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m = &t.model;
        let s = &self.synth;
        let pair = |p: (f64, f64)| format!("{},{}", p.0, p.1);
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data", self.data.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("synth.train", self.synth_train.to_string()),
            ("synth.test", self.synth_test.to_string()),
            ("synth.size", s.size.to_string()),
            ("synth.crack_count", format!("{},{}", s.crack_count.0, s.crack_count.1)),
            ("synth.step_jitter", s.step_jitter.to_string()),
            ("synth.length", pair(s.length)),
            ("synth.branch_probability", s.branch_probability.to_string()),
            ("synth.width", pair(s.width)),
            ("synth.max_foreground", s.max_foreground.to_string()),
            ("synth.texture_amplitude", s.texture_amplitude.to_string()),
            ("synth.crack_darkness", pair(s.crack_darkness)),
            ("synth.thermal_contrast", pair(s.thermal_contrast)),
            ("synth.thermal_blur", s.thermal_blur.to_string()),
            ("synth.rgb_noise", s.rgb_noise.to_string()),
            ("synth.thermal_noise", s.thermal_noise.to_string()),
            ("synth.shadows", s.shadows.to_string()),
            ("synth.watermarks", s.watermarks.to_string()),
            ("model.stage_channels", join(&m.stage_channels)),
            ("model.stage_strides", join(&m.stage_strides)),
            ("model.fusion", join(&m.fusion.map(u8::from))),
            ("model.heads", m.heads.to_string()),
            ("model.kv_reduction", join(&m.kv_reduction)),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.segments", m.segments.to_string()),
            ("model.decoder_width", m.decoder_width.to_string()),
            ("model.zero_init_residual", m.zero_init_residual.to_string()),
            ("loss.alpha", t.loss.alpha.to_string()),
            ("loss.beta", t.loss.beta.to_string()),
            ("loss.gamma", t.loss.gamma.to_string()),
            ("loss.delta", t.loss.delta.to_string()),
            ("loss.skeleton_iterations", t.loss.skeleton_iterations.to_string()),
            ("loss.eps", t.loss.eps.to_string()),
            ("optim.lr", t.optimizer.lr.to_string()),
            ("optim.weight_decay", t.optimizer.weight_decay.to_string()),
            ("optim.beta1", t.optimizer.beta1.to_string()),
            ("optim.beta2", t.optimizer.beta2.to_string()),
            ("optim.eps", t.optimizer.eps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.size", t.train_size.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.target_val_dice", t.target_val_dice.map_or("none".into(), |v| v.to_string())),
            ("eval.size", t.eval_size.to_string()),
            ("eval.threshold", t.threshold.to_string()),
            ("eval.split", self.eval_split.to_string()),
            (
                "eval.aggregation",
                match self.aggregation {
                    Aggregation::Micro => "micro",
                    Aggregation::Macro => "macro",
                }
                .into(),
            ),
            ("eval.save_masks", self.save_masks.to_string()),
            ("bench.sizes", join(&self.bench.sizes)),
            ("bench.channels", join(&self.bench.channels)),
            ("bench.segments", join(&self.bench.segments)),
            ("bench.measure_limit", self.bench.measure_limit.to_string()),
            ("bench.repeats", self.bench.repeats.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back_to_the_same_config() {
        for preset in [Preset::Desk, Preset::PaperProtocol] {
            let mut c = RunConfig::preset(preset);
            c.set("seed", "7").unwrap();
            c.set("model.fusion", "1,0,1").unwrap();
            c.set("train.target_val_dice", "0.7").unwrap();
            c.set("loss.delta", "0").unwrap();
            c.set("synth.width", "1.5,3").unwrap();
            let mut back = RunConfig::default();
            back.apply_text(&c.render(), "echo").unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn paper_protocol_preset_values() {
        let c = RunConfig::preset(Preset::PaperProtocol);
        assert_eq!((c.train.batch_size, c.train.epochs, c.train.train_size, c.train.eval_size), (8, 150, 480, 480));
        assert_eq!(c.train.optimizer.weight_decay, 1e-4);
        let d = RunConfig::preset(Preset::Desk);
        assert_eq!((d.synth_train, d.synth_test, d.synth.size), (200, 40, 64));
    }

    #[test]
    fn bad_lines_are_config_errors() {
        let mut c = RunConfig::default();
        for text in ["nonsense", "bogus = 1", "train.epochs = -1", "model.fusion = 1,2,0", "model.stage_channels = 4,4"] {
            let err = c.apply_text(text, "f").unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
        c.apply_text("# comment\n\n train.epochs =  3 \n", "f").unwrap();
        assert_eq!(c.train.epochs, 3);
    }
}
