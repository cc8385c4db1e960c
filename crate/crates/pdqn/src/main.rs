use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pdqn::config::{ExperimentConfig, RateWindow, SweepAxis, SweepSpec};
use pdqn::experiments::{self, CmdError, Overrides, RateReport};
use pdqn::io::TraceTable;

/// Decentralized consensus optimization experiments.
///
/// Exit codes: 0 success, 1 validation failure, 2 invariant failure.
#[derive(Parser)]
#[command(name = "pdqn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Problem seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Iteration budget.
    #[arg(long)]
    iters: Option<usize>,
    /// Error threshold; replaces the configured list.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    diagnostics: Option<Toggle>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and write one trace CSV each plus a summary.
    Run(Common),
    /// Run at least two methods and chart error by iteration and by exchanges.
    Compare(Common),
    /// Check eigenvalue intervals, secant conditions, oracles, fixed points and ledgers.
    Validate(Common),
    /// Fit a linear rate to a trace file, or to a fresh run of the first method.
    RateFit {
        #[command(flatten)]
        common: Common,
        /// Existing trace CSV to fit instead of running.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-1)]
        start: f64,
        #[arg(long, default_value_t = 1e-8)]
        end: f64,
    },
    /// Sweep eta, K, alpha or seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis to sweep; overrides the config.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values; overrides the config.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CmdError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CmdError::Refused("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    Overrides {
        out: common.out.clone(),
        seed: common.seed,
        iterations: common.iters,
        threshold: common.threshold,
        diagnostics: common.diagnostics.map(|t| matches!(t, Toggle::On)),
    }
    .apply(&mut cfg);
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Run(c) => {
            let (report, status) = experiments::cmd_run(&load(&c)?)?;
            print!("{report}");
            status
        }
        Command::Compare(c) => {
            let (report, status) = experiments::cmd_compare(&load(&c)?)?;
            print!("{report}");
            status
        }
        Command::Validate(c) => {
            let report = experiments::cmd_validate(&load(&c)?)?;
            print!("{report}");
            let failed: Vec<String> = report.failures().iter().map(|c| c.name.clone()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CmdError::Invariant(failed.join(", ")))
            }
        }
        Command::RateFit {
            common,
            trace,
            start,
            end,
        } => {
            let report = match trace {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|source| CmdError::Io { path: path.clone(), source })?;
                    let table = TraceTable::parse(&text)?;
                    RateReport {
                        label: table.meta.label.clone(),
                        fit: experiments::rate_fit_table(&table, start, end),
                    }
                }
                None => {
                    let mut cfg = load(&common)?;
                    cfg.rate_window = RateWindow { start, end };
                    experiments::cmd_rate_fit(&cfg)?
                }
            };
            println!("{report}");
            match &report.fit {
                Ok(_) => Ok(()),
                Err(e) => Err(CmdError::Invariant(e.to_string())),
            }
        }
        Command::Sweep { common, axis, values } => {
            let mut cfg = load(&common)?;
            if axis.is_some() || values.is_some() {
                let axis = match axis {
                    Some(a) => SweepAxis::parse(&a).ok_or_else(|| CmdError::Refused(format!("unknown sweep axis {a:?}; use eta, K, alpha or seeds")))?,
                    None => cfg
                        .sweep
                        .as_ref()
                        .map(|s| s.axis)
                        .ok_or_else(|| CmdError::Refused("--values needs --axis or a configured sweep".into()))?,
                };
                let values = values.or_else(|| cfg.sweep.as_ref().map(|s| s.values.clone())).unwrap_or_default();
                cfg.sweep = Some(SweepSpec { axis, values });
            }
            let report = experiments::cmd_sweep(&cfg)?;
            print!("{report}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
