use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bsee_control::config::{ExperimentConfig, Suite};
use bsee_control::lattice::LatticeMode;
use bsee_control::report::Status;
use bsee_control::runner::{
    convergence_sweep, run_experiment, sweep_check, write_outputs, ExitStatus, Outcome, Report, RunOptions,
    SuiteCheck,
};
use bsee_control::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bsee-control", version, about = "Optimal control of backward stochastic evolution equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output.dir`, then `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the lattice mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Deterministic,
    Tree,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and run the config's check suites.
    Solve(Common),
    /// Solve and run the named suites only.
    Check {
        #[command(flatten)]
        common: Common,
        /// Suite name; repeat or comma-separate for several.
        #[arg(long, required = true, value_delimiter = ',')]
        suite: Vec<String>,
    },
    /// Convergence sweep over refinement levels.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Time steps (abstract problems) or mesh sizes (parabolic problems).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.mode = match mode {
            ModeArg::Deterministic => LatticeMode::Deterministic,
            ModeArg::Tree => LatticeMode::Tree,
        };
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(&cfg.name));
    Ok((cfg, out))
}

fn parse_suites(names: &[String]) -> Result<Vec<Suite>, Error> {
    names
        .iter()
        .map(|n| {
            Suite::parse(n.trim()).ok_or_else(|| Error::Config {
                field: "--suite".into(),
                message: format!(
                    "unknown suite '{n}', expected one of {}",
                    Suite::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
                ),
            })
        })
        .collect()
}

fn print_checks(checks: &[SuiteCheck]) {
    if checks.is_empty() {
        return;
    }
    println!("{:<12} {:<28} {:<6} {:>14}", "suite", "check", "status", "margin");
    for c in checks {
        let status = match c.record.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Skip => "skip",
        };
        println!("{:<12} {:<28} {:<6} {:>14.6e}", c.suite, c.record.name, status, c.record.margin);
        if let Some(w) = &c.record.witness {
            println!("{:<12}   witness: {w}", "");
        }
    }
}

fn print_report(report: &Report) {
    println!("{} ({:?}, {:?}, N = {}, T = {})", report.name, report.problem, report.mode, report.steps, report.horizon);
    if let Some(s) = &report.summary {
        println!("  cost J = {:.10} (running {:.10}, terminal {:.10})", s.cost.total, s.cost.running, s.cost.terminal);
        if s.y0.len() <= 4 {
            println!("  y(0) = {:?}", s.y0);
        }
        if let Some(c) = &s.continuation {
            println!(
                "  continuation: delta {:.4}, {} stages, residual {:.3e}",
                c.step_delta,
                c.rho_schedule.len(),
                c.final_residual
            );
        }
    }
    print_checks(&report.checks);
    if let Some(t) = &report.sweep {
        println!("{:>8} {:>16} {:>8}", t.variable, "error", "order");
        for r in &t.rows {
            let order = r.order.map(|o| format!("{o:.3}")).unwrap_or_default();
            println!("{:>8} {:>16.6e} {:>8}", r.level, r.error, order);
        }
        if let Some(why) = &t.aborted {
            println!("  sweep aborted: {why}");
        }
    }
    if let Some(e) = &report.error {
        println!("error: {e}");
    }
    println!("status: {:?}", report.status);
}

fn finish(outcome: Outcome, out: &Path) -> Result<ExitStatus, Error> {
    write_outputs(&outcome, out)?;
    print_report(&outcome.report);
    Ok(outcome.status())
}

fn execute(cli: Cli) -> Result<ExitStatus, Error> {
    match cli.command {
        Command::Solve(common) => {
            let (cfg, out) = load(&common)?;
            finish(run_experiment(&cfg, &RunOptions::default())?, &out)
        }
        Command::Check { common, suite } => {
            let (cfg, out) = load(&common)?;
            let options = RunOptions {
                suites: Some(parse_suites(&suite)?),
                force_solve: false,
            };
            finish(run_experiment(&cfg, &options)?, &out)
        }
        Command::Sweep { common, levels } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(levels) = levels {
                cfg.convergence.levels = levels;
            }
            cfg.validate()?;
            let table = convergence_sweep(&cfg, &cfg.convergence.levels)?;
            let mut outcome = run_experiment(
                &cfg,
                &RunOptions {
                    suites: Some(Vec::new()),
                    force_solve: false,
                },
            )?;
            outcome.report.checks.push(SuiteCheck {
                suite: Suite::Convergence.name(),
                record: sweep_check(&table),
            });
            outcome.report.suites = vec![Suite::Convergence];
            outcome.report.sweep = Some(table);
            outcome.report.refresh_status();
            finish(outcome, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match execute(cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::for_error(&e)
        }
    };
    ExitCode::from(status.code() as u8)
}
