//! `nl3d` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nl3d::model::DEFAULT_CAM_LAYER;

/// Spatiotemporal fatigue estimation toolkit.
#[derive(Parser, Debug)]
#[command(name = "nl3d", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; takes precedence over `train.seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic clip dataset with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory; every file the command writes goes here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest, holding out videos for validation.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory; every file the command writes goes here.
        #[arg(long)]
        out: PathBuf,
        /// Clip manifest; defaults to `dataset.dir/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Initial weights, e.g. from `inflate`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Evaluate trained weights on a held-out manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory; every file the command writes goes here.
        #[arg(long)]
        out: PathBuf,
        /// Trained weight file.
        #[arg(long)]
        weights: PathBuf,
        /// Clip manifest; defaults to `dataset.dir/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Video-level k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        /// Output directory; every file the command writes goes here.
        #[arg(long)]
        out: PathBuf,
        /// Clip manifest; defaults to `dataset.dir/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Sweep one setting, or compare the two heads.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Output directory; every file the command writes goes here.
        #[arg(long)]
        out: PathBuf,
        /// Clip manifest; defaults to `dataset.dir/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// batch_size | augmentation | backbone | attention_position | loss
        #[arg(long)]
        variable: Option<String>,
        /// Comma-separated values of the variable.
        #[arg(long)]
        values: Option<String>,
        /// Train the regression and classification heads and report both.
        #[arg(long, conflicts_with_all = ["variable", "values"])]
        compare_heads: bool,
    },
    /// Grad-CAM heatmaps and guided backpropagation for one clip.
    Gradcam {
        #[command(flatten)]
        common: Common,
        /// Output directory; every file the command writes goes here.
        #[arg(long)]
        out: PathBuf,
        /// Trained weight file.
        #[arg(long)]
        weights: PathBuf,
        /// Clip file (`{video}_{index}.vfc`).
        #[arg(long)]
        clip: PathBuf,
        /// Target class index.
        #[arg(long = "class")]
        class: usize,
        /// Convolution whose activations are weighted.
        #[arg(long, default_value = DEFAULT_CAM_LAYER)]
        layer: String,
    },
    /// Inflate a 2D weight file into the configured 3D model.
    Inflate {
        #[command(flatten)]
        common: Common,
        /// Output directory; every file the command writes goes here.
        #[arg(long)]
        out: PathBuf,
        /// 2D weight file.
        #[arg(long)]
        weights: PathBuf,
    },
    /// Print the layer shape trace and parameter counts.
    Inspect {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
