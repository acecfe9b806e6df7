use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepqc_cli::{cmd_compare, cmd_evaluate, cmd_flag, cmd_predict, cmd_synth, cmd_train, CliError, Config};

/// Quality control for soil-moisture sensor time series.
#[derive(Debug, Parser)]
#[command(name = "deepqc", version)]
struct Cli {
    /// TOML config with optional [rules], [train], [synth] and [model] sections.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for synthesis, site splits and training; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus (corpus.csv, ground_truth.csv).
    Synth {
        /// Output directory.
        #[arg(long, value_name = "PATH", default_value = ".")]
        out: PathBuf,
    },
    /// Run the rule engine and write a CSV with a qflag column.
    Flag {
        /// Input corpus CSV.
        input: PathBuf,
        /// Output CSV.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train a model on the manual flags of a corpus.
    Train {
        /// Input corpus CSV with manual_flag labels.
        input: PathBuf,
        /// Model file; the epoch history is written next to it.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Score every reading with a trained model.
    Predict {
        /// Input corpus CSV.
        input: PathBuf,
        /// Model file.
        model: PathBuf,
        /// Output CSV with probability and anomaly columns.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Probability at or above which a reading is anomalous.
        #[arg(long, value_name = "P")]
        threshold: Option<f64>,
    },
    /// Score predictions (anomaly or qflag column) against manual flags.
    Evaluate {
        /// Reference corpus CSV with manual_flag labels.
        reference: PathBuf,
        /// Predicted CSV from `flag` or `predict`.
        predicted: PathBuf,
        /// Report directory.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Rule engine and model side by side, with timings.
    Compare {
        /// Input corpus CSV with manual_flag labels.
        input: PathBuf,
        /// Model file.
        model: PathBuf,
        /// Report directory.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Probability at or above which a reading is anomalous.
        #[arg(long, value_name = "P")]
        threshold: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threshold = match &cli.command {
        Command::Predict { threshold, .. } | Command::Compare { threshold, .. } => *threshold,
        _ => None,
    };
    let cfg = Config::load(cli.config.as_deref())?.with_overrides(cli.seed, threshold)?;
    match cli.command {
        Command::Synth { out } => {
            let (corpus, truth) = cmd_synth(&cfg, &out)?;
            println!("{}\n{}", corpus.display(), truth.display());
        }
        Command::Flag { input, out } => cmd_flag(&input, &cfg, &out)?,
        Command::Train { input, out } => {
            let hist = cmd_train(&input, &cfg, &out)?;
            println!("{}\n{}", out.display(), hist.display());
        }
        Command::Predict { input, model, out, .. } => cmd_predict(&input, &model, &out, cfg.model.threshold)?,
        Command::Evaluate { reference, predicted, out } => {
            let m = cmd_evaluate(&reference, &predicted, &out)?;
            println!("recall {:.4} precision {:.4}", m.recall(), m.precision());
        }
        Command::Compare { input, model, out, .. } => {
            let (r, m) = cmd_compare(&input, &cfg, &model, &out)?;
            println!("rules recall {:.4} precision {:.4}", r.recall(), r.precision());
            println!("model recall {:.4} precision {:.4}", m.recall(), m.precision());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
