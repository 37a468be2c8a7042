//! `drl`: generate confounded data, fit the sequence models, train and
//! evaluate actor-critic policies, and run table-model causal queries.
//!
//! Exit status is 0 on success, 1 when a command fails while running and 2
//! for usage or configuration errors.

mod commands;
mod config;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use config::Profile;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "drl", version, about = "Deconfounding actor-critic toolkit")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// JSON run configuration; the bundled profile is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// Overrides every seed in the configuration (and `DRL_SEED`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Decon,
    Alt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    Vanilla,
    Direct,
    Decon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QueryMode {
    Cond,
    Do,
    Simpson,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test dataset files.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the confounded (decon) or confounder-free (alt) model.
    TrainModel {
        /// Dataset directory or training file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an actor-critic policy inside a model or the reward table.
    TrainPolicy {
        #[arg(long, conflicts_with = "oracle")]
        model: Option<PathBuf>,
        /// Use the confounding table as the environment.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum)]
        algo: Algo,
        /// Dataset directory or training file, for model and direct sources.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a policy (or a constant action) and write an EvalReport.
    Eval {
        #[arg(long, conflicts_with = "constant_action")]
        policy: Option<PathBuf>,
        /// Always play this environment-scale action.
        #[arg(long, allow_hyphen_values = true)]
        constant_action: Option<f64>,
        #[arg(long, conflicts_with = "oracle")]
        model: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        /// Dataset directory or test file supplying initial states.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a model forward from one test frame.
    Counterfactual {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory or test file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Global frame index: sequence `i / T`, step `i % T`.
        #[arg(long, default_value_t = 0)]
        frame_index: usize,
        #[arg(long, default_value_t = 4)]
        horizon: usize,
        /// Model-scale actions in [-1, 1]; random when omitted.
        #[arg(long, num_args = 1.., allow_hyphen_values = true)]
        actions: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct test sequences through the posterior.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory or test file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of leading sequences to reconstruct.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Conditional, interventional or Simpson query on a CPT file.
    CausalQuery {
        #[arg(long)]
        cpt: PathBuf,
        /// `expectation` or `prob:<index>`.
        #[arg(long, default_value = "expectation")]
        outcome: String,
        #[arg(long, value_enum)]
        mode: QueryMode,
        /// Whether larger outcome values are better (simpson mode).
        #[arg(long, default_value = "higher")]
        better: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = commands::Context::new(&cli)?;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&ctx, out),
        Command::TrainModel { data, variant, out } => commands::train_model(&ctx, data, variant, out),
        Command::TrainPolicy {
            model,
            oracle,
            algo,
            data,
            out,
        } => commands::train_policy(&ctx, model, oracle, algo, data, out),
        Command::Eval {
            policy,
            constant_action,
            model,
            oracle,
            data,
            episodes,
            steps,
            out,
        } => commands::eval(
            &ctx,
            commands::EvalArgs {
                policy,
                constant_action,
                model,
                oracle,
                data,
                episodes,
                steps,
                out,
            },
        ),
        Command::Counterfactual {
            model,
            data,
            frame_index,
            horizon,
            actions,
            out,
        } => commands::counterfactual(&ctx, model, data, frame_index, horizon, actions, out),
        Command::Reconstruct {
            model,
            data,
            count,
            out,
        } => commands::reconstruct(&ctx, model, data, count, out),
        Command::CausalQuery {
            cpt,
            outcome,
            mode,
            better,
            out,
        } => commands::causal_query(&ctx, cpt, &outcome, mode, &better, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
