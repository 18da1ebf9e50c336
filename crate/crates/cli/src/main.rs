//! `pvmap`: synthesize scenes, extract patches, train, predict, detect and score.
//!
//! Exit codes: 0 success, 2 usage error, 3 invalid or unreadable input,
//! 4 numerical failure during training.

mod commands;
mod config;
mod plot;
mod run;
mod scenes;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::List;

/// Bad flags, config keys or setting values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "pvmap", version, about = "Solar-array mapping pipeline for aerial imagery")]
pub struct Cli {
    /// Worker threads; results are identical for any count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Settings file of `key = value` lines; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes with panel annotations.
    Synth(SynthArgs),
    /// Sample training patches from a scene directory.
    Extract(ExtractArgs),
    /// Train a classifier or segmenter on extracted patches.
    Train(TrainArgs),
    /// Produce stitched probability maps for every scene.
    Predict(PredictArgs),
    /// Threshold probability maps into object detections.
    Detect(DetectArgs),
    /// Pixel and object precision/recall with max F1.
    Score(ScoreArgs),
    /// Object max F1 across IoU thresholds.
    Sweep(SweepArgs),
    /// Raster, area and annotation counts per split.
    #[command(alias = "manifest")]
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Panels per scene.
    #[arg(long)]
    pub panels: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub min_side: Option<f64>,
    #[arg(long)]
    pub max_side: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
    /// Meters per pixel.
    #[arg(long)]
    pub resolution: Option<f64>,
    #[arg(long)]
    pub prefix: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `class` (center-pixel label) or `mask` (41x41 label).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of negatives in the final patch set.
    #[arg(long)]
    pub negative_share: Option<f64>,
    #[arg(long)]
    pub retention: Option<f64>,
    #[arg(long)]
    pub copies: Option<usize>,
    /// Share of whole rasters held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Directory written by `extract`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `classifier` or `segmenter`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub encoder: Option<List<usize>>,
    #[arg(long)]
    pub decoder: Option<List<usize>>,
    #[arg(long)]
    pub fc: Option<List<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `constant` or `halve:N`.
    #[arg(long)]
    pub schedule: Option<commands::ScheduleArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Blend window standard deviation in pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `pixel`, `object` or `both`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Object IoU thresholds, comma separated.
    #[arg(long)]
    pub iou: Option<List<f64>>,
    /// Also render PR curves as SVG.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub thresholds: Option<List<f64>>,
    /// Also render max F1 against IoU as SVG.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// `name=DIR` of annotation files; repeatable.
    #[arg(long = "split", required = true)]
    pub splits: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else if err.chain().any(|e| {
        matches!(
            e.downcast_ref::<pvmap::Error>(),
            Some(pvmap::Error::NonFiniteLoss { .. })
        )
    }) {
        4
    } else {
        3
    }
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> anyhow::Result<R> {
    match threads {
        Some(0) => Err(UsageError("--threads must be at least 1".into()).into()),
        #[cfg(feature = "parallel")]
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
        _ => Ok(f()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    match with_threads(threads, || commands::run(cli)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
