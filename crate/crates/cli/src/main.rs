//! Command-line front end: plan trajectories, replay them in closed loop,
//! run repeated-noise studies, and inspect result bundles.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use magnav_core::bundle::{write_bundle, BundleReport};
use magnav_core::scenario::{load_scenario, Scenario};
use magnav_core::sim::{monte_carlo, MonteCarloStats};
use magnav_core::solver::{solve, GainSchedule, SolveStatus, Trajectory};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "magnav",
    version = magnav_core::TOOL_VERSION,
    about = "Trajectory optimization and closed-loop control for magnetically actuated capsules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Emit machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Args)]
struct CommonRun {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Output bundle directory.
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
    /// Override the scenario's master noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the constrained trajectory optimization and write the bundle.
    Plan(CommonRun),
    /// Plan, then execute one noisy closed-loop run.
    Simulate(CommonRun),
    /// Plan, then run a repeated-noise study (closed and open loop).
    Sweep {
        #[command(flatten)]
        run: CommonRun,
        /// Number of noisy runs.
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
    /// Print a summary of an existing bundle directory.
    Report {
        /// Bundle directory written by a previous command.
        bundle: PathBuf,
    },
    /// Load and validate a scenario file without solving.
    Validate {
        /// Scenario file (TOML).
        scenario: PathBuf,
    },
}

fn load(run: &CommonRun) -> Result<Scenario> {
    let mut scenario = load_scenario(&run.scenario)
        .with_context(|| format!("loading {}", run.scenario.display()))?;
    if let Some(seed) = run.seed {
        scenario.noise.seed = seed;
    }
    Ok(scenario)
}

fn plan(scenario: &Scenario, quiet: bool) -> Result<(Trajectory, GainSchedule, magnav_core::solver::SolverReport)> {
    if !quiet {
        eprintln!(
            "planning `{}`: {} steps of {} s",
            scenario.name, scenario.horizon.steps, scenario.horizon.dt
        );
    }
    let (traj, gains, report) = solve(scenario)?;
    if !quiet {
        eprintln!(
            "solved: status {:?}, cost {:.6}, max violation {:.3e}, {} outer iterations",
            report.status,
            traj.cost,
            traj.max_violation,
            report.iterations.len()
        );
    }
    if report.status == SolveStatus::Diverged {
        anyhow::bail!("solver diverged");
    }
    Ok((traj, gains, report))
}

fn print_stats(stats: &MonteCarloStats, scenario: &Scenario, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(stats)?);
        return Ok(());
    }
    // Report in the scenario's declared units.
    let scale = 1.0 / scenario.declared_units.length_scale();
    let unit = match scenario.declared_units {
        magnav_core::scenario::UnitSystem::Si => "m",
        magnav_core::scenario::UnitSystem::Cm => "cm",
    };
    println!("final position error over {} runs ({unit}):", stats.runs);
    println!(
        "{:>12} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "", "mean", "std", "min", "median", "max"
    );
    for (label, s) in [("closed loop", &stats.closed_loop), ("open loop", &stats.open_loop)] {
        println!(
            "{label:>12} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.mean * scale,
            s.std * scale,
            s.min * scale,
            s.median * scale,
            s.max * scale
        );
    }
    println!();
    println!(
        "{:<36} {:>9} {:>9} {:>9}",
        "Parameter", "X", "Y", "Z"
    );
    let t = &stats.terminal;
    let vel_unit = format!("{unit}/s");
    let rows: [(String, &[f64; 3], f64); 6] = [
        (format!("Initial Position [{unit}]"), &t.initial_position, scale),
        (format!("Goal Position [{unit}]"), &t.goal_position, scale),
        (format!("Mean Position at Final [{unit}]"), &t.mean_final_position, scale),
        (format!("Std. Dev. Position at Final [{unit}]"), &t.std_final_position, scale),
        (format!("Mean Velocity at Final [{vel_unit}]"), &t.mean_final_velocity, scale),
        (format!("Std. Dev. Velocity at Final [{vel_unit}]"), &t.std_final_velocity, scale),
    ];
    for (label, values, s) in rows {
        println!(
            "{label:<36} {:>9.3} {:>9.3} {:>9.3}",
            values[0] * s,
            values[1] * s,
            values[2] * s
        );
    }
    if !stats.failures.is_empty() {
        println!("failed runs:");
        for (i, reason) in &stats.failures {
            println!("  run {i}: {reason}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Plan(common) => {
            let scenario = load(&common)?;
            let (traj, gains, report) = plan(&scenario, cli.quiet)?;
            write_bundle(&common.output, &scenario, &traj, &gains, &report, None)?;
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "status": report.status,
                        "cost": traj.cost,
                        "max_violation": traj.max_violation,
                        "bundle": common.output,
                    })
                );
            } else if !cli.quiet {
                println!("bundle written to {}", common.output.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(common) => {
            let scenario = load(&common)?;
            let (traj, gains, report) = plan(&scenario, cli.quiet)?;
            let stats = monte_carlo(&scenario, &traj, &gains, 1);
            write_bundle(&common.output, &scenario, &traj, &gains, &report, Some(&stats))?;
            print_stats(&stats, &scenario, cli.json)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { run: common, runs } => {
            let scenario = load(&common)?;
            let (traj, gains, report) = plan(&scenario, cli.quiet)?;
            let stats = monte_carlo(&scenario, &traj, &gains, runs);
            write_bundle(&common.output, &scenario, &traj, &gains, &report, Some(&stats))?;
            print_stats(&stats, &scenario, cli.json)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { bundle } => {
            let report_text = std::fs::read_to_string(bundle.join("report.json"))
                .with_context(|| format!("reading {}/report.json", bundle.display()))?;
            let report: BundleReport = serde_json::from_str(&report_text)?;
            let stats: Option<MonteCarloStats> =
                match std::fs::read_to_string(bundle.join("stats.json")) {
                    Ok(text) => Some(serde_json::from_str(&text)?),
                    Err(_) => None,
                };
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "report": report, "stats": stats })
                );
            } else {
                println!("scenario:      {}", report.scenario_name);
                println!("tool version:  {}", report.tool_version);
                println!("master seed:   {}", report.master_seed);
                println!("status:        {:?}", report.solver.status);
                println!("final cost:    {:.6}", report.final_cost);
                println!("max violation: {:.3e}", report.max_violation);
                if let Some(stats) = &stats {
                    println!(
                        "runs: {} (closed mean {:.4} m, open mean {:.4} m)",
                        stats.runs, stats.closed_loop.mean, stats.open_loop.mean
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { scenario } => match load_scenario(&scenario) {
            Ok(sc) => {
                if cli.json {
                    println!("{}", serde_json::json!({ "valid": true, "name": sc.name }));
                } else {
                    println!("ok: `{}` is valid", sc.name);
                }
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => {
                if cli.json {
                    println!(
                        "{}",
                        serde_json::json!({ "valid": false, "error": e.to_string() })
                    );
                } else {
                    eprintln!("invalid: {e}");
                }
                Ok(ExitCode::from(2))
            }
        },
    }
}
