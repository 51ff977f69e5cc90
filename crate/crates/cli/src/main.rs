use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use orthonet_cli::{cmd_corrupt_eval, cmd_eval, cmd_probe, cmd_train, load_config, split_overrides};

/// Orthogonality-constrained network training and spectral probing.
///
/// Any config key can be overridden on the command line with
/// `--<section>.<key>=<value>` (or `--set <section>.<key>=<value>`);
/// overrides apply last. `ORTHONET_OUT` overrides `[output] dir`.
#[derive(Parser)]
#[command(name = "orthonet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network per the run config; writes metrics, checkpoints,
    /// and a summary under the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch (for later --resume); the learning-rate
        /// schedule still spans the configured epoch count.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Report the test-split error rate of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the configured spectral/isometry probes on a checkpoint.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on corrupted test data (4 kinds x 5 severities).
    CorruptEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let (plain, overrides) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(plain) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/error text.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let run = || -> anyhow::Result<()> {
        match &cli.command {
            Command::Train {
                config,
                resume,
                stop_after,
            } => {
                let cfg = load_config(config, &overrides)?;
                cmd_train(&cfg, resume.as_deref(), *stop_after)
            }
            Command::Eval { config, checkpoint } => {
                let cfg = load_config(config, &overrides)?;
                cmd_eval(&cfg, checkpoint).map(|_| ())
            }
            Command::Probe { config, checkpoint } => {
                let cfg = load_config(config, &overrides)?;
                cmd_probe(&cfg, checkpoint)
            }
            Command::CorruptEval { config, checkpoint } => {
                let cfg = load_config(config, &overrides)?;
                cmd_corrupt_eval(&cfg, checkpoint)
            }
        }
    };

    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
