//! Command-line driver for the federated oil-water-layer experiments.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error,
//! 3 gradient-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedowl::experiment::{
    gradcheck_suite, run_ablate, run_finetune_eval, run_synth, run_train_federated,
    suite_passes, ExperimentConfig, GRADCHECK_TOLERANCE,
};
use fedowl::Error;

#[derive(Parser)]
#[command(
    name = "fedowl",
    about = "Federated oil-water-layer identification experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config JSON; defaults to the built-in reference setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset as per-well CSVs.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the federated training loop and write history + checkpoint.
    TrainFederated {
        #[command(flatten)]
        common: CommonArgs,
        /// Client training threads; 0 means one per client.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fine-tune a checkpoint on one well of a block, tracing per-round
    /// curves on the remaining wells.
    FinetuneEval {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint produced by train-federated.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target block id.
        #[arg(long)]
        block: String,
        /// Fine-tune rounds, overriding the config's.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Run the loss/fusion/mask ablation grid with shared seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Verify every analytic gradient against finite differences.
    Gradcheck,
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Config-shaped failures exit 1, everything else 2.
fn failure_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { common } => {
            let config = load_config(&common)?;
            let manifest = run_synth(&config, &common.out)?;
            println!(
                "wrote {} well files under {} (class counts {:?})",
                manifest.files.len(),
                common.out.display(),
                manifest.class_counts
            );
        }
        Command::TrainFederated { common, workers } => {
            let mut config = load_config(&common)?;
            if let Some(w) = workers {
                config.server.workers = w;
            }
            let summary = run_train_federated(&config, &common.out)?;
            println!(
                "{} rounds in {:.1}s: probe acc {:.4}, probe macro F1 {:.4}",
                summary.rounds,
                summary.wall_time_s,
                summary.final_probe_acc,
                summary.final_probe_macro_f1
            );
        }
        Command::FinetuneEval {
            common,
            checkpoint,
            block,
            rounds,
        } => {
            let mut config = load_config(&common)?;
            if let Some(r) = rounds {
                config.finetune_rounds = r;
            }
            let report = run_finetune_eval(&config, &checkpoint, &block, &common.out)?;
            println!(
                "fine-tuned on {}/{}; curves for {} test well(s) under {}",
                report.target_block,
                report.finetune_well,
                report.curves.len(),
                common.out.display()
            );
        }
        Command::Ablate { common, workers } => {
            let mut config = load_config(&common)?;
            if let Some(w) = workers {
                config.server.workers = w;
            }
            let rows = run_ablate(&config, &common.out)?;
            println!("{} grid cells written to {}/ablate.csv", rows.len(), common.out.display());
        }
        Command::Gradcheck => {
            let reports = gradcheck_suite()?;
            for r in &reports {
                println!(
                    "{:28} max rel err {:.3e} over {} draws  {}",
                    r.name,
                    r.max_err,
                    r.draws,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            if !suite_passes(&reports) {
                eprintln!("gradient check failed (tolerance {GRADCHECK_TOLERANCE:.0e})");
                std::process::exit(3);
            }
            println!("all gradients within {GRADCHECK_TOLERANCE:.0e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap's default usage-error exit code is 2; the contract wants 1
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(failure_code(&err))
        }
    }
}
