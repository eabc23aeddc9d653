//! `hurdlecast`: simulate, fit, calibrate, forecast, evaluate and report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod ranges;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hurdlecast_core::panel::Month;

#[derive(Parser, Debug)]
#[command(name = "hurdlecast", version, about = "Hurdle forecasts of sparse conflict fatality counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutDir {
    /// Output directory
    #[arg(long, env = "HURDLECAST_OUT", default_value = "hurdlecast-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct DeArgs {
    /// Differential evolution population size
    #[arg(long, default_value_t = 40)]
    pub de_pop: usize,
    /// Differential evolution generation cap
    #[arg(long, default_value_t = 200)]
    pub de_gens: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a synthetic panel and write it with its true parameters
    Simulate {
        #[arg(long, default_value_t = 10)]
        countries: usize,
        #[arg(long, default_value_t = 10)]
        cells: usize,
        #[arg(long, default_value_t = 60)]
        months: usize,
        #[arg(long)]
        seed: u64,
        /// Months between covariates and the targets they drive
        #[arg(long, default_value_t = 2)]
        lag: u32,
        #[command(flatten)]
        out: OutDir,
    },
    /// Fit the three stages on months up to `--through`
    Fit {
        #[arg(long, value_parser = ranges::existing_file)]
        input: PathBuf,
        /// Covariate spec (TOML); the built-in conflict spec if absent
        #[arg(long, value_parser = ranges::existing_file)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 2, value_parser = ranges::step)]
        lag: u32,
        /// Last training month; the last month of the panel if absent
        #[arg(long)]
        through: Option<Month>,
        /// Recorded in the model file
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Choose the hurdle thresholds on one month
    Calibrate {
        #[arg(long, value_parser = ranges::existing_file)]
        input: PathBuf,
        /// Model file; `<out>/model.hcm` if absent
        #[arg(long)]
        model: Option<PathBuf>,
        /// Refuse a model fit with a different spec
        #[arg(long, value_parser = ranges::existing_file)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Calibration month; the month after training if absent
        #[arg(long)]
        month: Option<Month>,
        #[command(flatten)]
        de: DeArgs,
        #[command(flatten)]
        out: OutDir,
    },
    /// Forecast the months after the panel ends
    Forecast {
        #[arg(long, value_parser = ranges::existing_file)]
        input: PathBuf,
        #[arg(long, value_parser = ranges::existing_file)]
        spec: Option<PathBuf>,
        /// Model file; `<out>/model.hcm` if absent
        #[arg(long, conflicts_with = "steps")]
        model: Option<PathBuf>,
        /// Thresholds; `<out>/hurdles.toml` if absent
        #[arg(long, conflicts_with = "steps")]
        hurdles: Option<PathBuf>,
        /// Fit, calibrate and forecast in one go for these steps, e.g. `2..7`
        #[arg(long, value_parser = ranges::steps, requires = "seed")]
        steps: Option<ranges::Steps>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        de: DeArgs,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[command(flatten)]
        out: OutDir,
    },
    /// Expanding-window backtest with per-step scores
    Evaluate {
        #[arg(long, value_parser = ranges::existing_file)]
        input: PathBuf,
        #[arg(long, value_parser = ranges::existing_file)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Steps ahead, e.g. `2..7` or `2,4`
        #[arg(long, default_value = "2..7", value_parser = ranges::steps)]
        steps: ranges::Steps,
        /// Forecast months, e.g. `54..59`; the last six months if absent
        #[arg(long, value_parser = ranges::months)]
        eval_months: Option<ranges::Months>,
        #[command(flatten)]
        de: DeArgs,
        #[arg(long, default_value_t = 0.048)]
        epsilon: f64,
        /// Worker threads; output does not depend on it
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Also print and write a plain-text score table
        #[arg(long)]
        report: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Render a scores CSV as a table
    Report {
        #[arg(long, value_parser = ranges::existing_file)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.048)]
        epsilon: f64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Simulate {
            countries,
            cells,
            months,
            seed,
            lag,
            out,
        } => simulate(countries, cells, months, seed, lag, &out.out),
        Command::Fit {
            input,
            spec,
            lag,
            through,
            seed,
            out,
        } => fit(&input, spec.as_deref(), lag, through, seed, &out.out),
        Command::Calibrate {
            input,
            model,
            spec,
            seed,
            month,
            de,
            out,
        } => calibrate(&input, model, spec.as_deref(), seed, month, &de, &out.out),
        Command::Forecast {
            input,
            spec,
            model,
            hurdles,
            steps,
            seed,
            de,
            parallel,
            out,
        } => match (steps, seed) {
            (Some(steps), Some(seed)) => forecast_all(&input, spec.as_deref(), &steps.0, seed, &de, parallel, &out.out),
            _ => forecast(&input, spec.as_deref(), model, hurdles, &out.out),
        },
        Command::Evaluate {
            input,
            spec,
            seed,
            steps,
            eval_months,
            de,
            epsilon,
            parallel,
            report,
            out,
        } => evaluate(&EvaluateArgs {
            input,
            spec,
            seed,
            steps: steps.0,
            eval_months: eval_months.map(|m| m.0),
            de,
            epsilon,
            parallel,
            report,
            out: out.out,
        }),
        Command::Report { input, epsilon } => report(&input, epsilon),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 2 on usage errors and 0 for --help / --version
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
