//! `ridc`: simulate markets, estimate the model on a market table, and turn
//! estimates into welfare distributions. See the guide's command line
//! chapter for the file formats; `--help` documents the flags.

mod commands;
mod config;
mod data;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ridc::moments::WeightScheme;

#[derive(Debug)]
pub enum CliError {
    /// Configuration or input data failed validation. Exit code 2.
    Config(String),
    /// Same exit code, but the message concerns the data file.
    Data(String),
    /// A numeric routine failed: no convergence, singular weighting. Exit 3.
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<ridc::Error> for CliError {
    fn from(e: ridc::Error) -> Self {
        use ridc::Error::*;
        match &e {
            InvalidInput(_) | DimensionMismatch { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "ridc", version, about = "Discrete choice under costly attention and persuasion")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Cap the number of worker threads. Output bytes never depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Treat weak identification as an error (exit code 4).
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw markets from a configured design and write the market table
    /// plus a truth sidecar.
    Simulate {
        /// TOML design file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the configured stream seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the model to a market table: stage-one preferences, recovered
    /// shocks, and the signal parameter when exposed markets are present.
    Estimate {
        /// TOML config; `[spec]` must match the data's columns.
        #[arg(long)]
        config: PathBuf,
        /// Market table CSV.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the optimizer's multistart seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Moment weighting scheme.
        #[arg(long, value_enum)]
        weight: Option<WeightArg>,
        /// Bootstrap replications for the signal parameter.
        #[arg(long, value_name = "R")]
        bootstrap: Option<usize>,
    },
    /// Achievement distributions at previously saved estimates, with and
    /// without persuasion when a stage-2 fit exists.
    Welfare {
        /// Directory a previous `estimate` run wrote.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum WeightArg {
    Identity,
    Efficient,
}

impl From<WeightArg> for WeightScheme {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::Identity => WeightScheme::Identity,
            WeightArg::Efficient => WeightScheme::Efficient,
        }
    }
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs: must be positive".into()));
        }
        // Build errors mean a pool already exists, which only happens in
        // tests driving run() twice; the cap is best-effort there.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let ctx = commands::RunContext { jobs: cli.jobs, strict: cli.strict };
    match &cli.command {
        Command::Simulate { config, out, seed } => commands::cmd_simulate(config, out, *seed, &ctx),
        Command::Estimate { config, data, out, seed, weight, bootstrap } => {
            let flags = commands::EstimateFlags {
                seed: *seed,
                weight: weight.map(WeightScheme::from),
                bootstrap: *bootstrap,
            };
            commands::cmd_estimate(config, data, out, &flags, &ctx)
        }
        Command::Welfare { data, out } => commands::cmd_welfare(data, out, &ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
