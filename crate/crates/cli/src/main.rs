mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use koopman_core::Error;

#[derive(Parser)]
#[command(name = "koopman", version, about = "Spectral extraction and staged Koopman autoencoder training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// JSON run configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Budget {
    /// Phase epochs from the configuration (defaults 100/100/200/600).
    Full,
    /// One twentieth of the full budget.
    Smoke,
}

#[derive(Args, Clone, Debug)]
pub struct TrainFlags {
    #[arg(long, value_enum)]
    pub budget: Option<Budget>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cap on mini-batches per epoch (default: one full pass).
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a benchmark system into train/test CSV files.
    Generate {
        #[command(flatten)]
        common: Common,
        /// discrete-spectrum, fluid-flow, pendulum or lorenz.
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        traj_len: Option<usize>,
    },
    /// Run the spectral stage and write spectral.json.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        r_max: Option<usize>,
        #[arg(long)]
        tol_improve: Option<f64>,
        /// Skip the order search.
        #[arg(long)]
        order: Option<usize>,
    },
    /// Train one model and write its checkpoint, metrics.csv and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// spectral.json from `extract`; without it the stage is run inline.
        #[arg(long)]
        spectral: Option<PathBuf>,
        /// lusch, no-pretrain or with-pretrain.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        m_real: Option<usize>,
        #[arg(long)]
        m_complex: Option<usize>,
        #[arg(long)]
        order: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Test trajectories to write curves for (default: all).
        #[arg(long)]
        n_traj: Option<usize>,
    },
    /// Train the baseline at all 15 eigenvalue configurations.
    SweepEig {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Marks the extracted configuration; run inline when absent.
        #[arg(long)]
        spectral: Option<PathBuf>,
        #[arg(long)]
        order: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the pretrained model with the order forced to each value.
    SweepOrder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated orders (default 1..=r_max).
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<usize>>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// 2 for bad input or configuration, 3 for numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.cmd {
        Cmd::Generate {
            common,
            system,
            n_train,
            n_test,
            traj_len,
        } => commands::generate(&common, system.as_deref(), n_train, n_test, traj_len),
        Cmd::Extract {
            common,
            data,
            r_max,
            tol_improve,
            order,
        } => commands::extract(&common, &data, r_max, tol_improve, order),
        Cmd::Train {
            common,
            data,
            spectral,
            mode,
            m_real,
            m_complex,
            order,
            train,
        } => commands::train(
            &common,
            &data,
            spectral.as_deref(),
            mode.as_deref(),
            (order, m_real, m_complex),
            &train,
        ),
        Cmd::Eval {
            common,
            checkpoint,
            data,
            n_traj,
        } => commands::eval(&common, &checkpoint, &data, n_traj),
        Cmd::SweepEig {
            common,
            data,
            spectral,
            order,
            train,
            jobs,
        } => commands::sweep_eig(&common, &data, spectral.as_deref(), order, &train, jobs),
        Cmd::SweepOrder {
            common,
            data,
            orders,
            train,
            jobs,
        } => commands::sweep_order(&common, &data, orders, &train, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
