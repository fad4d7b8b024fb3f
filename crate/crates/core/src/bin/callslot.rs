use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use callslot::analysis::{AnalysisOptions, BootstrapSettings, CallSet, TTestKind};
use callslot::cli::{self, BehaviorSource, CliError, ReplayArgs, ReplayTarget, TrialConfig, TuneArgs, OUT_ENV};
use callslot::domain::Arm;
use callslot::matcomp::SolverSettings;

#[derive(Parser)]
#[command(name = "callslot", version, about = "Call-slot scheduling trials: simulate, analyze, tune, replay")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CallSetArg {
    First,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum TTestArg {
    Welch,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Treatment,
    Control,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    PerUserExploit,
    Uniform,
}

#[derive(clap::Args)]
struct StatFlags {
    #[arg(long, value_enum, default_value = "all")]
    is_call_set: CallSetArg,
    #[arg(long, value_enum, default_value = "welch")]
    ttest: TTestArg,
    #[arg(long, default_value_t = 2000)]
    resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl StatFlags {
    fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            ttest: match self.ttest {
                TTestArg::Welch => TTestKind::Welch,
                TTestArg::Pooled => TTestKind::Pooled,
            },
            is_call_set: match self.is_call_set {
                CallSetArg::First => CallSet::First,
                CallSetArg::All => CallSet::All,
            },
            bootstrap: BootstrapSettings {
                resamples: self.resamples,
                level: self.level,
            },
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate two-arm trials from a TOML config and analyse each seed.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Analyse a call log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        dropout: Option<PathBuf>,
        #[arg(long, default_value_t = 21)]
        baseline_days: u32,
        #[command(flatten)]
        stats: StatFlags,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Grid-search the regularisation weight on a log's baseline calls.
    Tune {
        #[arg(long)]
        log: PathBuf,
        /// Comma-separated lambda grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[arg(long, default_value_t = 21)]
        baseline_days: u32,
        /// Weight every observed cell equally instead of by attempt count.
        #[arg(long)]
        unit_weights: bool,
        #[arg(long, default_value_t = SolverSettings::default().tol)]
        tol: f64,
        #[arg(long, default_value_t = SolverSettings::default().max_iter)]
        max_iter: usize,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Off-policy value of a target policy by importance sampling.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        dropout: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "per-user-exploit")]
        target: TargetArg,
        /// Assert the log was collected by the uniform-random policy.
        #[arg(long, conflicts_with = "behavior")]
        assume_uniform: bool,
        /// CSV of `slot,prob` behavior probabilities.
        #[arg(long)]
        behavior: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "control")]
        arm: ArmArg,
        #[arg(long, default_value_t = 21)]
        baseline_days: u32,
        #[command(flatten)]
        stats: StatFlags,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::Simulate { config, seed, out } => {
            let mut cfg = TrialConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = cli::resolve_out_dir(out.as_deref(), cfg.output_dir.as_deref());
            let report = cli::cmd_simulate(&cfg, &out)?;
            print!("{}", report.summary_table());
            eprintln!("wrote {}", out.display());
        }
        Command::Analyze {
            log,
            dropout,
            baseline_days,
            stats,
            out,
        } => {
            let out = cli::resolve_out_dir(out.as_deref(), None);
            let report = cli::cmd_analyze(&log, dropout.as_deref(), baseline_days, &stats.options(), &out)?;
            print!("{}", report.to_text());
        }
        Command::Tune {
            log,
            grid,
            holdout,
            baseline_days,
            unit_weights,
            tol,
            max_iter,
            out,
        } => {
            let args = TuneArgs {
                grid: grid.unwrap_or(SolverSettings::default().lambda_grid),
                holdout_fraction: holdout,
                baseline_days,
                pooled_weights: !unit_weights,
                tol,
                max_iter,
            };
            let out = cli::resolve_out_dir(out.as_deref(), None);
            print!("{}", cli::cmd_tune(&log, &args, &out)?.to_text());
        }
        Command::Replay {
            log,
            dropout,
            target,
            assume_uniform,
            behavior,
            arm,
            baseline_days,
            stats,
            out,
        } => {
            let behavior = match (assume_uniform, behavior) {
                (_, Some(p)) => BehaviorSource::File(p),
                (true, None) => BehaviorSource::AssumeUniform,
                (false, None) => {
                    return Err(CliError::Usage(
                        "replay needs --assume-uniform or --behavior <csv>".into(),
                    ))
                }
            };
            let args = ReplayArgs {
                target: match target {
                    TargetArg::PerUserExploit => ReplayTarget::PerUserExploit,
                    TargetArg::Uniform => ReplayTarget::Uniform,
                },
                behavior,
                arm: match arm {
                    ArmArg::Treatment => Some(Arm::Treatment),
                    ArmArg::Control => Some(Arm::Control),
                    ArmArg::All => None,
                },
                baseline_days,
                options: stats.options(),
            };
            let out = cli::resolve_out_dir(out.as_deref(), None);
            print!("{}", cli::cmd_replay(&log, dropout.as_deref(), &args, &out)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
