//! `tmil`: reproducible multi-instance learning runs driven by one TOML
//! config file. See the crate's `cli` module docs for the config schema.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use targeted_mil::cli::{self, CliError, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "tmil",
    version,
    about = "Weakly-supervised multi-instance learning: synthesize bags, \
             train, evaluate, sweep, and export reconstructions"
)]
struct TmilArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Path to the TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build train/test bag datasets from IDX image and label files.
    Synthesize {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the dataset generation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the target class (0-9).
        #[arg(long)]
        target_class: Option<u8>,
    },
    /// Train the targeted model and write a checkpoint plus history.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the checkpoint output path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train the max-pooling baseline and write a checkpoint plus history.
    TrainBaseline {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the checkpoint output path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test bags and write a metrics report.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the report output path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train and evaluate across bag sizes or witness rates.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the report output path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Sweep axis: bag_size or witness_rate.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Export original/reconstruction grids through a trained checkpoint.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the grid output path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run the synthetic identifiability experiment and write its report.
    Identifiability {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the data generation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the report output path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synthesize {
            config,
            seed,
            target_class,
        } => cli::cmd_synthesize(
            &RunConfig::load(&config.config)?,
            &Overrides {
                seed,
                target_class,
                ..Overrides::default()
            },
        ),
        Command::Train { config, seed, out } => cli::cmd_train(
            &RunConfig::load(&config.config)?,
            &Overrides {
                seed,
                out,
                ..Overrides::default()
            },
        ),
        Command::TrainBaseline { config, seed, out } => cli::cmd_train_baseline(
            &RunConfig::load(&config.config)?,
            &Overrides {
                seed,
                out,
                ..Overrides::default()
            },
        ),
        Command::Eval { config, out } => cli::cmd_eval(
            &RunConfig::load(&config.config)?,
            &Overrides {
                out,
                ..Overrides::default()
            },
        ),
        Command::Sweep {
            config,
            seed,
            out,
            axis,
            values,
        } => cli::cmd_sweep(
            &RunConfig::load(&config.config)?,
            &Overrides {
                seed,
                out,
                axis,
                values,
                ..Overrides::default()
            },
        ),
        Command::Reconstruct { config, out } => cli::cmd_reconstruct(
            &RunConfig::load(&config.config)?,
            &Overrides {
                out,
                ..Overrides::default()
            },
        ),
        Command::Identifiability { config, seed, out } => cli::cmd_identifiability(
            &RunConfig::load(&config.config)?,
            &Overrides {
                seed,
                out,
                ..Overrides::default()
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let args = TmilArgs::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
