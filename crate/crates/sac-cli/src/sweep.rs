//! Initial-condition sweep of the reduced cart-pendulum: a theta x thetadot
//! grid, each cell inverted in closed loop and scored against the
//! convergence criterion |theta(10 s)| < 0.001 rad, |thetadot| < 0.001
//! rad/s.

use nalgebra::DVector;
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

use crate::assemble_benchmark;
use sac::benchmarks::Plant;
use sac::control::run_closed_loop;
use sac::objectives::wrap_angle;
use sac::{Result, SacError};

#[derive(Debug, Serialize, Clone)]
struct IcResult {
    theta0: f64,
    thetadot0: f64,
    theta_final: f64,
    thetadot_final: f64,
    converged: bool,
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    benchmark: String,
    theta_count: usize,
    thetadot_count: usize,
    converged: usize,
    total: usize,
    seed: u64,
}

fn run_one(overrides: &[String], theta0: f64, thetadot0: f64) -> Result<IcResult> {
    // Each worker wires its own benchmark instance: the plant and cost hold
    // closures and are not shared across threads.
    let (mut b, _) = assemble_benchmark(Some("cart_pendulum_sweep".into()), None, overrides)?;
    b.x0 = DVector::from_vec(vec![theta0, thetadot0]);
    let model = match &b.plant {
        Plant::Smooth(model) => model,
        Plant::Hybrid { .. } => unreachable!("sweep benchmark is smooth"),
    };
    let res = run_closed_loop(model, &b.cost, &b.x0, (0.0, b.duration), &b.params, b.plant_dt)?;
    let xf = res.trajectory.final_state();
    let theta_final = wrap_angle(xf[0]);
    Ok(IcResult {
        theta0,
        thetadot0,
        theta_final,
        thetadot_final: xf[1],
        converged: theta_final.abs() < 1e-3 && xf[1].abs() < 1e-3,
    })
}

pub fn cmd_sweep(
    config: Option<String>,
    theta_count: usize,
    thetadot_count: usize,
    out: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Vec<String>,
) -> Result<i32> {
    if theta_count == 0 || thetadot_count == 0 {
        return Err(SacError::Usage("grid counts must be positive".into()));
    }
    // Fold config-file overrides into the plain override list so workers can
    // rebuild the benchmark independently.
    let mut all_overrides = Vec::new();
    if let Some(p) = &config {
        let cfg = crate::config::ExperimentConfig::load(p)?;
        for (k, v) in &cfg.overrides {
            all_overrides.push(format!("{k}={}", crate::config::value_to_string(v)));
        }
        if let Some(d) = cfg.duration {
            all_overrides.push(format!("duration={d}"));
        }
    }
    all_overrides.extend(overrides);

    // theta uniform over [0, 2 pi), thetadot over [0, 4 pi].
    let mut grid = Vec::new();
    for i in 0..theta_count {
        let theta0 = 2.0 * std::f64::consts::PI * i as f64 / theta_count as f64;
        for j in 0..thetadot_count {
            let thetadot0 = if thetadot_count == 1 {
                0.0
            } else {
                4.0 * std::f64::consts::PI * j as f64 / (thetadot_count - 1) as f64
            };
            grid.push((theta0, thetadot0));
        }
    }

    // Fan out across independent controller instances.
    let results: Vec<Result<IcResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&(t0, td0)| {
                let ov = &all_overrides;
                scope.spawn(move || run_one(ov, t0, td0))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let results: Result<Vec<IcResult>> = results.into_iter().collect();
    let results = results?;

    let converged = results.iter().filter(|r| r.converged).count();
    let summary = SweepSummary {
        benchmark: "cart_pendulum_sweep".into(),
        theta_count,
        thetadot_count,
        converged,
        total: results.len(),
        seed: seed.unwrap_or(0),
    };

    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)
            .map_err(|e| SacError::Usage(format!("cannot create output dir: {e}")))?;
        let mut csv = std::fs::File::create(dir.join("sweep_ics.csv"))
            .map_err(|e| SacError::Config(format!("create csv: {e}")))?;
        writeln!(csv, "theta0,thetadot0,theta_final,thetadot_final,converged")
            .map_err(|e| SacError::Config(format!("csv write: {e}")))?;
        for r in &results {
            writeln!(
                csv,
                "{:.12e},{:.12e},{:.12e},{:.12e},{}",
                r.theta0, r.thetadot0, r.theta_final, r.thetadot_final, r.converged
            )
            .map_err(|e| SacError::Config(format!("csv write: {e}")))?;
        }
        let report = serde_json::json!({ "summary": summary, "results": results });
        std::fs::write(
            dir.join("sweep_ics.json"),
            serde_json::to_string_pretty(&report).unwrap(),
        )
        .map_err(|e| SacError::Config(format!("write json: {e}")))?;
    }
    for r in &results {
        println!("{}", serde_json::to_string(r).unwrap());
    }
    println!("{}", serde_json::to_string(&summary).unwrap());
    Ok(if converged == results.len() { 0 } else { 1 })
}
