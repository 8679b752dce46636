//! `gridstab` — command-line driver for the hybrid stability pipeline.
//!
//! Every verb reads the same TOML config (or the built-in defaults) and a
//! stage-scoped seed derived from the master seed, so long experiments can be
//! re-run one stage at a time. A lock file keeps the process single-instance
//! per output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gridstab::experiment::{
    build_report, emit_report, eval_ml, eval_rl, fit_oracle, hybrid_eval, prep_data, run_all,
    train_ml, train_rl, DirLock, ExperimentConfig, ExperimentError,
};
use gridstab::rl::Algorithm;

#[derive(Parser)]
#[command(name = "gridstab", version, about = "Smart-grid stability: stacked classifiers gating RL power control")]
struct Cli {
    /// Path to a TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Override the raw dataset path from the config.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load (or synthesize) the raw dataset, augment, and split.
    PrepData,
    /// Fit the stacked classifier ensemble on the train split.
    TrainMl,
    /// Evaluate all classifiers on the test split and print per-class metrics.
    EvalMl,
    /// Fit the stability oracle that drives the environment.
    FitOracle,
    /// Train one RL agent against the fitted oracle.
    TrainRl {
        #[arg(long)]
        algo: AlgoArg,
    },
    /// Greedy-evaluate one trained agent over seeded episodes.
    EvalRl {
        #[arg(long)]
        algo: AlgoArg,
    },
    /// Run the gate + policy pipeline over the test split for every agent.
    Hybrid,
    /// Assemble and emit the report from existing artifacts.
    Report,
    /// Execute every stage in order and emit the report.
    RunAll,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Dqn,
    A2c,
    Ppo,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Algorithm {
        match a {
            AlgoArg::Dqn => Algorithm::Dqn,
            AlgoArg::A2c => Algorithm::A2c,
            AlgoArg::Ppo => Algorithm::Ppo,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(dataset) = &cli.dataset {
        config.dataset = Some(dataset.clone());
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let config = load_config(cli)?;

    // run-all takes the directory lock itself; every other verb holds it
    // for the duration of its stage.
    let _lock = match cli.command {
        Command::RunAll => None,
        _ => Some(DirLock::acquire(&config.output_dir)?),
    };

    match &cli.command {
        Command::PrepData => {
            let summary = prep_data(&config)?;
            println!(
                "prep-data: {} raw rows -> {} augmented ({} train / {} test), {} label mismatches",
                summary.rows_raw,
                summary.rows_augmented,
                summary.rows_train,
                summary.rows_test,
                summary.label_mismatches
            );
        }
        Command::TrainMl => {
            let model = train_ml(&config)?;
            println!("train-ml: stacked {} base learners over {} folds", model.base.len(), model.k);
        }
        Command::EvalMl => {
            let eval = eval_ml(&config)?;
            println!(
                "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                "model", "acc", "prec(U)", "rec(U)", "f1(U)", "prec(S)", "rec(S)", "f1(S)"
            );
            for r in &eval.reports {
                println!(
                    "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                    r.model,
                    r.accuracy,
                    r.unstable.precision,
                    r.unstable.recall,
                    r.unstable.f1,
                    r.stable.precision,
                    r.stable.recall,
                    r.stable.f1
                );
            }
        }
        Command::FitOracle => {
            let eval = fit_oracle(&config)?;
            match eval.rmse {
                Some(rmse) => println!("fit-oracle: surrogate held-out RMSE {rmse:.6}"),
                None => println!("fit-oracle: linear oracle constructed"),
            }
        }
        Command::TrainRl { algo } => {
            let algo = Algorithm::from(*algo);
            let summary = train_rl(&config, algo)?;
            let median = summary
                .convergence_median
                .map(|m| m.to_string())
                .unwrap_or_else(|| "n/a".into());
            println!(
                "train-rl: {} trained for {} episodes in {:.2}s, median convergence {}",
                algo.name(),
                summary.episodes,
                summary.training_seconds,
                median
            );
        }
        Command::EvalRl { algo } => {
            let algo = Algorithm::from(*algo);
            let report = eval_rl(&config, algo)?;
            println!(
                "eval-rl: {} success rate {:.3} over {} episodes (mean {:.1} steps, mean reward {:.1})",
                algo.name(),
                report.success_rate,
                report.episodes,
                report.mean_steps,
                report.mean_reward
            );
        }
        Command::Hybrid => {
            let set = hybrid_eval(&config)?;
            println!(
                "{:<10} {:>8} {:>10} {:>10} {:>10}",
                "agent", "stable", "unstable", "success", "mean-steps"
            );
            for row in &set.rows {
                println!(
                    "{:<10} {:>8} {:>10} {:>10.3} {:>10.2}",
                    row.algorithm.name(),
                    row.gated_stable,
                    row.gated_unstable,
                    row.success_rate,
                    row.mean_steps
                );
            }
        }
        Command::Report | Command::RunAll => {
            let report = match cli.command {
                Command::RunAll => run_all(&config)?,
                _ => {
                    let report = build_report(&config)?;
                    emit_report(&config, &report)?;
                    report
                }
            };
            println!(
                "report written to {} ({} classifiers, {} agents)",
                config.output_dir.display(),
                report.classifiers.len(),
                report.agents.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
