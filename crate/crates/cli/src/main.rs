mod commands;
mod config;
mod log;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use commands::{Ctx, Model};
use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "vineyield", version, about = "Vineyard yield estimation from proximal images and yield-monitor data")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Cnn,
    Transformer,
    Detection,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(clap::Args)]
struct ModelFlags {
    #[arg(long, value_enum, default_value = "transformer")]
    model: ModelArg,
    /// Transformer positional fusion; the config decides when omitted.
    #[arg(long, value_enum)]
    fusion: Option<OnOff>,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and calibrate the yield-monitor stream.
    Ingest,
    /// Bind images to yield points (nearest pairs and ±window).
    Associate,
    /// Label points train/validation/test from the region file.
    Split,
    /// Detection AP, origin-fixed calibration and detection-based predictions.
    Detcal {
        /// `count` or `area`; the config decides when omitted.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Fit a model on the train split, selecting on validation loss.
    Train {
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Predict yield for every associated point from a saved checkpoint.
    Predict {
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Metrics JSON for every split at the point level and each bin size.
    Evaluate {
        #[command(flatten)]
        model: ModelFlags,
        /// Bin size in meters; 0 is points only. All configured sizes when omitted.
        #[arg(long)]
        bin: Option<u32>,
    },
    /// Grad-CAM maps of the CNN, aggregated over held-out points.
    Saliency,
    /// Binned yield maps of measured and predicted yield.
    Map {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        bin: Option<u32>,
        #[arg(long)]
        format: Option<String>,
    },
    /// Generate a synthetic field with known ground truth.
    Synth,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Associate => "associate",
            Command::Split => "split",
            Command::Detcal { .. } => "detcal",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Saliency => "saliency",
            Command::Map { .. } => "map",
            Command::Synth => "synth",
        }
    }
}

fn resolve(cfg: &PipelineConfig, flags: &ModelFlags) -> Model {
    match flags.model {
        ModelArg::Cnn => Model::Cnn,
        ModelArg::Detection => Model::Detection,
        ModelArg::Transformer => Model::Transformer {
            fusion: flags.fusion.map_or(cfg.transformer.fusion, |f| matches!(f, OnOff::On)),
        },
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    std::fs::create_dir_all(&cfg.out)?;
    let ctx = Ctx::new(cfg, cli.command.name());
    log::info(ctx.command.as_str(), &format!("config {} seed {}", ctx.hash, ctx.cfg.seed));
    match &cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::Associate => commands::associate(&ctx),
        Command::Split => commands::split(&ctx),
        Command::Detcal { mode } => commands::detcal(&ctx, mode.as_deref()),
        Command::Train { model } => commands::train(&ctx, resolve(&ctx.cfg, model)),
        Command::Predict { model } => commands::predict(&ctx, resolve(&ctx.cfg, model)),
        Command::Evaluate { model, bin } => {
            check_bin(*bin)?;
            commands::evaluate(&ctx, resolve(&ctx.cfg, model), *bin)
        }
        Command::Saliency => commands::saliency(&ctx),
        Command::Map { model, bin, format } => {
            check_bin(*bin)?;
            commands::map(&ctx, resolve(&ctx.cfg, model), *bin, format.as_deref())
        }
        Command::Synth => commands::synth(&ctx),
    }
}

fn check_bin(bin: Option<u32>) -> Result<()> {
    match bin {
        None | Some(0) | Some(10) | Some(20) => Ok(()),
        Some(b) => bail!("--bin must be 0, 10 or 20, got {b}"),
    }
}

fn kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<vineyield_core::CoreError>() {
            return "pipeline";
        }
        if cause.is::<vineyield_neural::NeuralError>() {
            return "model";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "usage"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error(cli.command.name(), kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
