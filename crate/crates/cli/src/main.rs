//! `scaffold-rf`: dataset generation, training, single-image fitting,
//! rendering and evaluation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Runtime(#[from] scaffold_rf::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(_) | CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "scaffold-rf", version, about = "Scaffold-conditioned radiance fields from single images")]
pub struct Cli {
    /// Worker threads (default: SCAFFOLD_RF_THREADS, else available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory; every artifact of the run is written below it.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override `key=value` (repeatable, wins over --config).
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CameraSource {
    Given,
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectSet {
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct SceneInput {
    /// Dataset root (default: <out>/dataset).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Object id within the dataset, e.g. obj-0003.
    #[arg(long)]
    pub object: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate the procedural dataset into <out>/dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train shape and appearance networks with per-object codes.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root (default: <out>/dataset).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Objects to train on.
        #[arg(long, value_enum, default_value = "train")]
        objects: ObjectSet,
        /// Progress line interval in steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Fit codes (and optionally networks) to a single image.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint (default: <out>/model.srft).
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        scene: SceneInput,
        /// View index of the dataset object used as input.
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Input image (.png or .srft) instead of a dataset view.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Camera JSON for --image.
        #[arg(long)]
        camera_file: Option<PathBuf>,
        /// Foreground mask (.png) for --image.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Ground-truth voxels (.vxg) for --image.
        #[arg(long)]
        gt_voxels: Option<PathBuf>,
        /// v1 conditional-nerf, v2 shape-from-nr, v3 shape-from-mask, v4 shape-from-gt.
        #[arg(long, default_value = "v2")]
        variant: String,
        /// code-only or code-plus-network.
        #[arg(long, default_value = "code-only")]
        mode: String,
        /// Add the mirrored observation.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        symmetry: bool,
        #[arg(long, value_enum, default_value = "given")]
        camera: CameraSource,
        /// Steps of camera refinement for --camera estimate.
        #[arg(long, default_value_t = 300)]
        camera_iterations: usize,
    },
    /// Render novel views along a circular path.
    Render {
        #[command(flatten)]
        common: Common,
        /// Directory holding fit.srft / fit.json (default: <out>).
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Render a trained object instead of a fit.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Object id for --model.
        #[arg(long)]
        object: Option<String>,
    },
    /// Compare same-named PNGs in two directories.
    Metrics {
        #[command(flatten)]
        common: Common,
        dir_a: PathBuf,
        dir_b: PathBuf,
        /// Voxel grids to report IoU for.
        #[arg(long, requires = "voxels_b")]
        voxels_a: Option<PathBuf>,
        #[arg(long, requires = "voxels_a")]
        voxels_b: Option<PathBuf>,
    },
    /// Export the fitted voxel scaffold and score it against ground truth.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Directory holding fit.srft / fit.json (default: <out>).
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Ground-truth voxels (.vxg).
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        scene: SceneInput,
    },
    /// Run the invariant suite.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve_threads(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("SCAFFOLD_RF_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("SCAFFOLD_RF_THREADS must be a non-negative integer, got {v:?}"))),
        _ => Ok(0),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = resolve_threads(cli.threads).and_then(|n| {
        scaffold_rf::parallel::set_threads(n);
        commands::run(cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
