use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irfusion_cli::commands::{self, resolved_name};
use irfusion_cli::config::{Preset, RunConfig};
use irfusion_cli::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// RGB-thermal crack segmentation.
#[derive(Parser)]
#[command(name = "irfusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Starting preset, `desk` or `paper-protocol`.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `-s loss.alpha=0.3`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB-thermal crack corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Dataset directory to create.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset directory and save the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the crack mask of one aligned RGB/thermal pair.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        /// Mask PNG to write; the overlay goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate naive vs efficient attention memory and time.
    BenchAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn path_arg(key: &str, p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{key}={}", p.display()))
}

/// Defaults, preset, config file, then `--set` and the named flags. When
/// no file is given to `eval` or `predict`, the training configuration
/// saved beside the checkpoint is used.
fn resolve(common: &Common, flags: Vec<String>, beside_checkpoint: bool) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    overrides.extend(common.seed.map(|s| format!("seed={s}")));
    overrides.extend(flags);
    let mut cfg = RunConfig::preset(common.preset.parse::<Preset>()?);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    } else if beside_checkpoint {
        let mut probe = cfg.clone();
        for o in &overrides {
            probe.apply_override(o)?;
        }
        let saved = probe
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(resolved_name("train"));
        if saved.is_file() {
            cfg.apply_file(&saved)?;
        }
    }
    for o in &overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth { common, out: dir } => {
            let cfg = resolve(&common, path_arg("out", &dir).into_iter().collect(), false)?;
            commands::synth(&cfg, &mut out)?;
        }
        Command::Train {
            common,
            data,
            out: dir,
            epochs,
        } => {
            let mut flags: Vec<String> = [path_arg("data", &data), path_arg("out", &dir)].into_iter().flatten().collect();
            flags.extend(epochs.map(|e| format!("train.epochs={e}")));
            let cfg = resolve(&common, flags, false)?;
            commands::train(&cfg, &mut out)?;
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out: dir,
        } => {
            let flags = [path_arg("checkpoint", &checkpoint), path_arg("data", &data), path_arg("out", &dir)];
            let cfg = resolve(&common, flags.into_iter().flatten().collect(), true)?;
            commands::eval(&cfg, commands::threads_from_env()?, &mut out)?;
        }
        Command::Predict {
            common,
            checkpoint,
            rgb,
            thermal,
            out: mask,
        } => {
            let cfg = resolve(&common, path_arg("checkpoint", &checkpoint).into_iter().collect(), true)?;
            let p = commands::predict(&cfg, &rgb, &thermal, &mask)?;
            writeln!(
                out,
                "mask {} overlay {} foreground={} skeleton={}",
                p.mask_path.display(),
                p.overlay_path.display(),
                p.foreground,
                p.skeleton
            )
            .ok();
        }
        Command::BenchAttn { common, out: dir } => {
            let cfg = resolve(&common, path_arg("out", &dir).into_iter().collect(), false)?;
            commands::bench_attn(&cfg, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
