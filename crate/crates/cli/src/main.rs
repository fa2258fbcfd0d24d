use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Oriented object detection with a depthwise-separable transformer on
/// synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "odetr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the experiment configuration comes from.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config: default, overfit, gradcheck or full.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and the toy
    /// end-to-end loss. Exits nonzero if any relative error exceeds 1e-4.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Check only this op.
        #[arg(long, value_name = "NAME")]
        op: Option<String>,
        /// Lists the available op names and exits.
        #[arg(long)]
        list: bool,
        /// Writes gradcheck.csv here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Test fixture: perturbs every analytic gradient by 1%.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// IoU of two rotated boxes given as cx cy w h alpha (radians).
    Iou {
        #[arg(long, num_args = 5, allow_negative_numbers = true, value_names = ["CX", "CY", "W", "H", "ALPHA"], required = true)]
        a: Vec<f64>,
        #[arg(long, num_args = 5, allow_negative_numbers = true, value_names = ["CX", "CY", "W", "H", "ALPHA"], required = true)]
        b: Vec<f64>,
        /// Also prints a Monte-Carlo estimate with this many samples.
        #[arg(long, value_name = "N")]
        monte_carlo: Option<usize>,
    },
    /// Per-layer operation and parameter counts of both encoder kinds.
    Bench {
        #[arg(long, default_value_t = 32)]
        h: u64,
        #[arg(long, default_value_t = 32)]
        w: u64,
        #[arg(long, default_value_t = 256)]
        c: u64,
        /// Depthwise kernel extent.
        #[arg(long, default_value_t = 3)]
        k: u64,
        /// Prints JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Trains on the configured synthetic scenes and writes a checkpoint,
    /// the loss curve and final metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overrides the optimizer step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        thresholds: Option<Vec<f64>>,
        /// Progress line every N steps (0 silences it).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Metrics of a checkpoint on the scenes of its config.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Evaluate on the scenes of this config instead.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        thresholds: Option<Vec<f64>>,
        /// Writes metrics.csv here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Trains the refinement head on a frozen checkpoint.
    Finetune {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Takes fine-tune settings and seed from this config; the model
        /// layout always comes from the checkpoint.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        thresholds: Option<Vec<f64>>,
    },
    /// Writes the configured synthetic scenes as JSON.
    GenScenes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of scenes (defaults to the config's).
        #[arg(long)]
        count: Option<usize>,
        /// Also writes each image as a little-endian f64 .npy array.
        #[arg(long)]
        npy: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck {
            cfg,
            op,
            list,
            out,
            corrupt_gradient,
        } => commands::gradcheck(&cfg, op.as_deref(), list, out.as_deref(), corrupt_gradient),
        Command::Iou { a, b, monte_carlo } => commands::iou(&a, &b, monte_carlo),
        Command::Bench { h, w, c, k, json } => commands::bench(h, w, c, k, json),
        Command::Train {
            cfg,
            out,
            steps,
            thresholds,
            log_every,
        } => commands::train(&cfg, &out, steps, thresholds, log_every),
        Command::Eval {
            checkpoint,
            config,
            thresholds,
            out,
        } => commands::eval(&checkpoint, config.as_deref(), thresholds, out.as_deref()),
        Command::Finetune {
            checkpoint,
            config,
            seed,
            out,
            thresholds,
        } => commands::finetune_cmd(&checkpoint, config.as_deref(), seed, &out, thresholds),
        Command::GenScenes {
            cfg,
            out,
            count,
            npy,
        } => commands::gen_scenes(&cfg, &out, count, npy),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
