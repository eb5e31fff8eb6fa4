use clap::{Parser, Subcommand};
use geoplace_cli::commands;
use geoplace_cli::config::Config;
use geoplace_cli::error::CliError;
use std::path::PathBuf;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  other error
  2  invalid configuration or usage
  3  missing prerequisite artifact or input file
  4  artifact hash mismatch (inconsistent chain)
  5  corrupt or unrecognized file format";

/// Location estimation from precomputed feature vectors: adaptive sphere
/// partitioning, classification heads, contrastive retrieval, and
/// search-within-cell inference.
#[derive(Parser)]
#[command(name = "geoplace", version, after_help = EXIT_CODES)]
struct Cli {
    /// TOML config file (defaults to geoplace.toml; built-in defaults are
    /// used when the default file does not exist)
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset files
    Synth,
    /// Build the nested coarse/mid/fine partitions from the training set
    Partition,
    /// Train the configured classification head
    TrainClassifier,
    /// Train the residual retrieval module
    TrainRrm {
        /// Override the training loss (infonce|triplet)
        #[arg(long)]
        loss: Option<String>,
        /// Override the residual connection flag
        #[arg(long)]
        residual: Option<bool>,
        /// Override the LayerNorm placement
        #[arg(long)]
        placement: Option<String>,
    },
    /// Build the placeable background index
    BuildIndex {
        /// Embedding source (rrm|raw)
        #[arg(long, default_value = "rrm")]
        embedder: String,
    },
    /// Predict test-set locations and write the prediction file
    Predict {
        /// Inference mode (swc|retrieval)
        #[arg(long, default_value = "swc")]
        mode: String,
        /// Override the retrieved-neighbor count
        #[arg(long)]
        k: Option<usize>,
        /// Override the aggregator (spatial|average)
        #[arg(long)]
        aggregator: Option<String>,
    },
    /// Evaluate a prediction file against the test set
    Evaluate {
        /// Prediction file (defaults to the last `predict` artifact)
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Range set (baseline|fine|both)
        #[arg(long, default_value = "both")]
        ranges: String,
    },
    /// Run an ablation grid (k|loss|residual|aggregation)
    Ablate {
        #[arg(long)]
        grid: String,
    },
    /// Print the header of a binary artifact file
    Inspect { path: PathBuf },
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => {
            let default_path = PathBuf::from("geoplace.toml");
            if default_path.exists() {
                Config::load(&default_path)?
            } else {
                Config::default()
            }
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Inspect { path } => return commands::cmd_inspect(path),
        _ => {}
    }
    let config = load_config(cli)?;
    match &cli.command {
        Command::Synth => commands::cmd_synth(&config),
        Command::Partition => commands::cmd_partition(&config),
        Command::TrainClassifier => commands::cmd_train_classifier(&config),
        Command::TrainRrm {
            loss,
            residual,
            placement,
        } => commands::cmd_train_rrm(&config, loss.as_deref(), *residual, placement.as_deref()),
        Command::BuildIndex { embedder } => commands::cmd_build_index(&config, embedder),
        Command::Predict {
            mode,
            k,
            aggregator,
        } => commands::cmd_predict(&config, mode, *k, aggregator.as_deref()),
        Command::Evaluate {
            predictions,
            ranges,
        } => commands::cmd_evaluate(&config, predictions.as_deref(), ranges),
        Command::Ablate { grid } => commands::cmd_ablate(&config, grid),
        Command::Inspect { .. } => unreachable!("handled above"),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("geoplace: {err}");
        std::process::exit(err.exit_code());
    }
}
