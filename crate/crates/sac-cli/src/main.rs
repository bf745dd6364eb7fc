//! Experiment runner for the sequential-action control library: closed-loop
//! benchmark runs with CSV/JSON artifacts, verification suites, and the
//! cart-pendulum initial-condition sweep.

mod config;
mod output;
mod sweep;
mod verify;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use std::path::{Path, PathBuf};
use std::time::Instant;

use config::{apply_override, value_to_string, ExperimentConfig};
use output::{cycle_stats, RunSummary};
use sac::benchmarks::{build_benchmark, Benchmark, Plant};
use sac::control::run_closed_loop;
use sac::hybrid::run_hybrid_closed_loop;
use sac::objectives::eval_comparison_metric;
use sac::{Result, SacError};

#[derive(Parser)]
#[command(name = "sac", about = "Sequential-action control experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a closed-loop benchmark and write trajectory CSV + summary JSON.
    Run {
        /// Benchmark name (may also come from the config file).
        benchmark: Option<String>,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Parameter override, repeatable: KEY=VALUE.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a verification suite (bounce1d, gradient).
    Verify {
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep cart-pendulum initial conditions on a theta x thetadot grid.
    SweepIcs {
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 5)]
        theta_count: usize,
        #[arg(long, default_value_t = 4)]
        thetadot_count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(SacError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Run {
            benchmark,
            config,
            out,
            seed,
            overrides,
        } => cmd_run(benchmark, config, out, seed, overrides),
        Cmd::Verify { suite, out, seed } => cmd_verify(&suite, out, seed.unwrap_or(0)),
        Cmd::SweepIcs {
            config,
            theta_count,
            thetadot_count,
            out,
            seed,
            overrides,
        } => sweep::cmd_sweep(config, theta_count, thetadot_count, out, seed, overrides),
    }
}

/// Builds a benchmark from the config file plus CLI arguments; CLI values
/// win over the config file.
pub fn assemble_benchmark(
    positional: Option<String>,
    config_path: Option<String>,
    cli_overrides: &[String],
) -> Result<(Benchmark, ExperimentConfig)> {
    let cfg = match &config_path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let name = positional
        .or_else(|| cfg.benchmark.clone())
        .ok_or_else(|| SacError::Usage("no benchmark given (argument or config)".into()))?;
    let mut b = build_benchmark(&name)?;
    if let Some(d) = cfg.duration {
        b.duration = d;
    }
    for (k, v) in &cfg.overrides {
        apply_override(&mut b, k, &value_to_string(v))?;
    }
    for kv in cli_overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SacError::Usage(format!("override '{kv}' is not KEY=VALUE")))?;
        apply_override(&mut b, k, v)?;
    }
    Ok((b, cfg))
}

fn out_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cli
        .or_else(|| cfg.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| SacError::Usage(format!("cannot create output dir: {e}")))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| SacError::Config(format!("json: {e}")))?;
    std::fs::write(path, text).map_err(|e| SacError::Config(format!("write json: {e}")))
}

/// The swing-up comparison metric: quadratic tracking of the inverted state
/// with Q = Diag[1000, 10], R = [0.3], evaluated over the whole run.
fn comparison_metric(b: &Benchmark, traj: &sac::integrator::Trajectory) -> Option<f64> {
    if !b.name.starts_with("cart_pendulum") {
        return None;
    }
    let n = traj.states[0].len();
    let mut qdiag = vec![0.0; n];
    qdiag[0] = 1000.0;
    qdiag[1] = 10.0;
    let q = DMatrix::from_diagonal(&DVector::from_vec(qdiag));
    let r = DMatrix::from_element(1, 1, 0.3);
    eval_comparison_metric(traj, &q, &r, &|_t| DVector::zeros(n), &[0]).ok()
}

fn cmd_run(
    benchmark: Option<String>,
    config: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Vec<String>,
) -> Result<i32> {
    let (b, cfg) = assemble_benchmark(benchmark, config, &overrides)?;
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let dir = out_dir(out, &cfg)?;
    let csv_path = dir.join(format!("{}.csv", b.name));
    let json_path = dir.join(format!("{}.json", b.name));

    let (n, m) = match &b.plant {
        Plant::Smooth(s) => (s.state_dim(), s.control_dim()),
        Plant::Hybrid { model, .. } => {
            (model.location(0).state_dim(), model.location(0).control_dim())
        }
    };

    if b.duration == 0.0 {
        std::fs::write(&csv_path, format!("{}\n", output::csv_header(n, m)))
            .map_err(|e| SacError::Config(format!("write csv: {e}")))?;
        let summary = RunSummary {
            benchmark: b.name.clone(),
            duration: 0.0,
            rows: 0,
            final_cost_j1: 0.0,
            comparison_metric: None,
            transitions: 0,
            cycles: 0,
            accepted_actions: 0,
            rejected_actions: 0,
            mean_lambda: None,
            wall_time_s: 0.0,
            seed,
        };
        write_json(&json_path, &summary)?;
        println!("{}", serde_json::to_string(&summary).unwrap());
        return Ok(0);
    }

    let started = Instant::now();
    let span = (0.0, b.duration);
    let summary = match &b.plant {
        Plant::Smooth(model) => {
            let res = run_closed_loop(model, &b.cost, &b.x0, span, &b.params, b.plant_dt)?;
            let file = std::fs::File::create(&csv_path)
                .map_err(|e| SacError::Config(format!("create csv: {e}")))?;
            let (rows, j_accum) = output::write_smooth_csv(
                std::io::BufWriter::new(file),
                &res.trajectory,
                &b.cost,
                n,
                m,
            )?;
            let (accepted, rejected, mean_lambda) = cycle_stats(&res.cycles);
            let terminal = b
                .cost
                .terminal_cost(b.duration, res.trajectory.final_state());
            RunSummary {
                benchmark: b.name.clone(),
                duration: b.duration,
                rows,
                final_cost_j1: j_accum + terminal,
                comparison_metric: comparison_metric(&b, &res.trajectory),
                transitions: 0,
                cycles: res.cycles.len(),
                accepted_actions: accepted,
                rejected_actions: rejected,
                mean_lambda,
                wall_time_s: started.elapsed().as_secs_f64(),
                seed,
            }
        }
        Plant::Hybrid { model, q0 } => {
            let res =
                run_hybrid_closed_loop(model, &b.cost, *q0, &b.x0, span, &b.params, b.plant_dt)?;
            let file = std::fs::File::create(&csv_path)
                .map_err(|e| SacError::Config(format!("create csv: {e}")))?;
            let (rows, j_accum) = output::write_hybrid_csv(
                std::io::BufWriter::new(file),
                &res.trajectory,
                &b.cost,
                n,
                m,
            )?;
            let (accepted, rejected, mean_lambda) = cycle_stats(&res.cycles);
            let terminal = b
                .cost
                .terminal_cost(b.duration, res.trajectory.final_state());
            RunSummary {
                benchmark: b.name.clone(),
                duration: b.duration,
                rows,
                final_cost_j1: j_accum + terminal,
                comparison_metric: None,
                transitions: res.trajectory.transition_times.len(),
                cycles: res.cycles.len(),
                accepted_actions: accepted,
                rejected_actions: rejected,
                mean_lambda,
                wall_time_s: started.elapsed().as_secs_f64(),
                seed,
            }
        }
    };
    write_json(&json_path, &summary)?;
    println!("{}", serde_json::to_string(&summary).unwrap());
    Ok(0)
}

fn cmd_verify(suite: &str, out: Option<PathBuf>, seed: u64) -> Result<i32> {
    let checks = verify::run_suite(suite, seed)?;
    for c in &checks {
        println!("{}", serde_json::to_string(c).unwrap());
    }
    let all_pass = checks.iter().all(|c| c.pass);
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)
            .map_err(|e| SacError::Usage(format!("cannot create output dir: {e}")))?;
        write_json(&dir.join(format!("verify_{suite}.json")), &checks)?;
    }
    println!(
        "suite {suite}: {}/{} checks passed",
        checks.iter().filter(|c| c.pass).count(),
        checks.len()
    );
    Ok(if all_pass { 0 } else { 1 })
}
