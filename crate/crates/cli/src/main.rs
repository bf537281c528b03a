use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmc_core::config::{parse_overrides, ExperimentConfig};
use dmc_core::data::{dense_to_ratings, load_ratings, save_ratings, synth_low_rank, SynthSpec};
use dmc_core::eval::{maps, rmse};
use dmc_core::experiment::{run_experiment, write_outputs, Solver};
use dmc_core::factors::FactorDump;
use dmc_core::io::write_atomic;
use dmc_core::Error;

#[derive(Parser)]
#[command(name = "dmc", version, about = "Decentralized matrix completion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the decentralized engine on the configured pipeline.
    Run {
        config: PathBuf,
        /// `--key=value` overrides, e.g. `--engine.mode=verbatim` or `--agents 1`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run the centralized solver on the same pipeline.
    Baseline {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Write a synthetic low-rank rating file.
    Synth {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        items: usize,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output rating file.
        #[arg(long)]
        out: PathBuf,
        /// Optional fully observed ground-truth file.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Score a saved factor dump against a held-out rating file.
    Eval {
        factors: PathBuf,
        test: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        /// Directory for summary.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

fn experiment(config: &Path, overrides: &[String], solver: Solver) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(config, &parse_overrides(overrides)?)?;
    let report = run_experiment(&cfg, solver, None)?;
    write_outputs(&cfg, &report)?;
    let last = report.metrics.last();
    let maps = match &report.ranking {
        Ok(r) => format!("{:.4}", r.maps),
        Err(_) => "n/a".to_string(),
    };
    println!(
        "{} iterations, objective {:e}, train RMSE {:e}, test RMSE {}, mAPS {maps} -> {}",
        report.outcome.iterations,
        last.map_or(f64::NAN, |m| m.objective),
        last.map_or(f64::NAN, |m| m.train_rmse),
        last.and_then(|m| m.test_rmse)
            .map_or("n/a".to_string(), |v| format!("{v:e}")),
        cfg.output_dir.display()
    );
    Ok(())
}

fn synth(spec: SynthSpec, out: &Path, truth: Option<&Path>) -> Result<(), Error> {
    let (ratings, ground_truth) = synth_low_rank(&spec)?;
    save_ratings(&ratings, out)?;
    if let Some(path) = truth {
        save_ratings(&dense_to_ratings(&ground_truth), path)?;
    }
    println!("wrote {} ratings to {}", ratings.len(), out.display());
    Ok(())
}

fn eval(factors: &Path, test: &Path, threshold: f64, out: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(factors).map_err(|e| Error::io(factors, e))?;
    let model = FactorDump::parse(&text)?.into_model()?;
    let test = load_ratings(test)?.ratings;
    let ranking = maps(&model, &test, threshold)?;
    let error = rmse(&model, &test)?;
    let summary = serde_json::json!({
        "maps": ranking.maps,
        "counted_users": ranking.counted_users,
        "excluded_users": ranking.excluded_users,
        "rmse": error,
        "like_threshold": threshold,
    });
    write_atomic(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes(),
    )?;
    println!(
        "mAPS {:.4} over {} users ({} without likes), RMSE {error:e}",
        ranking.maps, ranking.counted_users, ranking.excluded_users
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => experiment(&config, &overrides, Solver::Decentralized),
        Command::Baseline { config, overrides } => experiment(&config, &overrides, Solver::Centralized),
        Command::Synth {
            users,
            items,
            rank,
            fraction,
            noise,
            seed,
            out,
            truth,
        } => synth(
            SynthSpec {
                users,
                items,
                rank,
                observe_fraction: fraction,
                noise_sd: noise,
                seed,
            },
            &out,
            truth.as_deref(),
        ),
        Command::Eval {
            factors,
            test,
            threshold,
            out,
        } => eval(&factors, &test, threshold, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
