//! `tollgate`: run, verify, calibrate and report on gated-agent scenarios.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tollgate_cli::calibrate::cmd_calibrate;
use tollgate_cli::report::cmd_report;
use tollgate_cli::run::cmd_run;
use tollgate_cli::verify::{cmd_verify, PotentialFixture, Suite, VerifyOptions};
use tollgate_cli::CliError;

#[derive(Debug, Parser)]
#[command(name = "tollgate", version, about = "Per-action risk tolls and a budget gate for autonomous agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run gated episodes and write logs, summary and manifest.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: u64,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run property suites and print one JSON result per property.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = VerifyOptions::default().seed)]
        seed: u64,
        /// Potential fixture for the no-splitting suite.
        #[arg(long)]
        potential: Option<PathBuf>,
        /// Episodes per scenario in the exact-envelope gating runs.
        #[arg(long, default_value_t = VerifyOptions::default().episodes)]
        episodes: u64,
    },
    /// Fit a conformal envelope and write the calibration set.
    Calibrate {
        #[arg(long)]
        scenario: PathBuf,
        /// Number of calibration points.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { scenario, episodes, seed, out } => {
            let r = cmd_run(&scenario, episodes, seed, &out)?;
            let a = &r.manifest.audit;
            println!(
                "{} episodes of {} written to {}; overruns {}, envelope violations {}, audit {}",
                r.manifest.episodes,
                r.manifest.scenario,
                out.display(),
                a.overruns,
                a.envelope_violations,
                if a.passed { "passed" } else { "failed" }
            );
            Ok(0)
        }
        Command::Verify { suite, seed, potential, episodes } => {
            let suite: Suite = suite.parse()?;
            let potential = potential.map(|p| PotentialFixture::load(&p)).transpose()?;
            let opts = VerifyOptions { seed, episodes, potential, ..VerifyOptions::default() };
            let report = cmd_verify(suite, &opts)?;
            for r in &report.results {
                println!("{}", serde_json::to_string(r).expect("results serialize"));
            }
            println!("{}", serde_json::json!({ "suite": suite, "seed": seed, "passed": report.passed }));
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Calibrate { scenario, n, delta, seed, out } => {
            let m = cmd_calibrate(&scenario, n, delta, seed, &out)?;
            println!("inflation {}", m.envelope.inflation);
            println!("quantile rank {} of {} (delta {})", m.envelope.quantile_rank, m.envelope.calibration_size, m.envelope.delta);
            Ok(0)
        }
        Command::Report { out } => {
            print!("{}", cmd_report(&out)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
