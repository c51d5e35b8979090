use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lhc::app::{self, Command, Options};
use lhc::scenario::Format;

/// Defaultable term-structure Monte Carlo under Levy noise with rating migration.
#[derive(Parser)]
#[command(name = "lhc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate paths and dump short rates, ratings and loss factors.
    Simulate(Common),
    /// Synthesize drifts on the initial market and report their residuals.
    Drift(Common),
    /// Price the scenario's bond along every path.
    Price(Common),
    /// Martingale test, drift residuals and consistency/HJM gap.
    Verify(Common),
    /// Merge JSON artifacts into one CSV table.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario file, or one of k2_market, k3_treasury, k3_par, k3_multiple.
    #[arg(long)]
    scenario: String,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (defaults to the scenario's).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write only this format.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Override the number of paths.
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding the artifacts; report.csv is written there.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON files to merge (default: every JSON file in --out).
    inputs: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<Common> for Options {
    fn from(c: Common) -> Self {
        Options {
            scenario: Some(c.scenario),
            seed: c.seed,
            threads: c.threads,
            out: c.out,
            format: c.format.map(|f| match f {
                FormatArg::Csv => Format::Csv,
                FormatArg::Json => Format::Json,
            }),
            paths: c.paths,
            inputs: Vec::new(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LHC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { app::EXIT_INVALID as u8 } else { 0 });
        }
    };
    let (cmd, opts) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c.into()),
        Cmd::Drift(c) => (Command::Drift, c.into()),
        Cmd::Price(c) => (Command::Price, c.into()),
        Cmd::Verify(c) => (Command::Verify, c.into()),
        Cmd::Report(r) => (
            Command::Report,
            Options {
                out: Some(r.out),
                inputs: r.inputs,
                ..Default::default()
            },
        ),
    };
    ExitCode::from(app::run(cmd, &opts) as u8)
}
