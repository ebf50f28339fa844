use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xdseg_cli::{
    cmd_analyze, cmd_eval, cmd_metrics, cmd_synth, cmd_train, load_unet, CliError, ExperimentConfig, Overrides,
    Predictor,
};

/// Cross-domain segmentation toolkit.
#[derive(Debug, Parser)]
#[command(name = "xdseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Run or dataset directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    /// Score the reference labels against themselves.
    Reference,
    /// Predict background everywhere.
    Background,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset and its manifest.
    Synth,
    /// Train a segmenter, or every point of the configured sweep.
    Train,
    /// Score a checkpoint on the test split.
    Eval {
        /// Defaults to `<out>/checkpoints/unet.ckpt`.
        #[arg(long, value_name = "PATH", conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Score a fixed predictor instead of a checkpoint.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Per-domain sparsity and response histograms of a checkpoint.
    Analyze {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Metrics of one segmentation against a reference, as JSON.
    Metrics {
        #[arg(long, value_name = "PATH")]
        seg: PathBuf,
        #[arg(long = "ref", value_name = "PATH")]
        reference: PathBuf,
        #[arg(long, default_value_t = 1)]
        class: usize,
        /// Report distances in voxels instead of millimetres.
        #[arg(long)]
        voxel_units: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        set: cli.set,
    };
    let config = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth => {
            let manifest = cmd_synth(&config)?;
            println!("{}", manifest.display());
        }
        Command::Train => {
            for dir in cmd_train(&config)? {
                println!("{}", dir.display());
            }
        }
        Command::Eval { checkpoint, baseline } => {
            let predictor = match baseline {
                Some(Baseline::Reference) => Predictor::Reference,
                Some(Baseline::Background) => Predictor::Background,
                None => {
                    let path = checkpoint.unwrap_or_else(|| config.default_checkpoint());
                    Predictor::from_checkpoint(&config, &path)?
                }
            };
            print!("{}", cmd_eval(&config, &predictor)?.table_csv());
        }
        Command::Analyze { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| config.default_checkpoint());
            let unet = load_unet(&config, &path)?;
            print!("{}", cmd_analyze(&config, &unet)?.sparsity_csv());
        }
        Command::Metrics {
            seg,
            reference,
            class,
            voxel_units,
        } => {
            let report = cmd_metrics(&seg, &reference, class, &config.eval.scales, !voxel_units)?;
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
