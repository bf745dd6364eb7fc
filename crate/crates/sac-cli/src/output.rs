//! Trajectory CSV and run-summary JSON emission.

use serde::Serialize;
use std::io::Write;

use sac::control::SacStepInfo;
use sac::dynamics::{ControlVec, StateVec};
use sac::integrator::{HybridTrajectory, Trajectory};
use sac::objectives::QuadraticTrackingCost;
use sac::{Result, SacError};

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub benchmark: String,
    pub duration: f64,
    pub rows: usize,
    pub final_cost_j1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison_metric: Option<f64>,
    pub transitions: usize,
    pub cycles: usize,
    pub accepted_actions: usize,
    pub rejected_actions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_lambda: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
}

pub fn cycle_stats(cycles: &[SacStepInfo]) -> (usize, usize, Option<f64>) {
    let accepted: Vec<f64> = cycles.iter().filter_map(|c| c.lambda).collect();
    let rejected = cycles.len() - accepted.len();
    let mean = if accepted.is_empty() {
        None
    } else {
        Some(accepted.iter().sum::<f64>() / accepted.len() as f64)
    };
    (accepted.len(), rejected, mean)
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

pub fn csv_header(n: usize, m: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n).map(|i| format!("x_{i}")));
    cols.extend((0..m).map(|k| format!("u_{k}")));
    cols.push("location".into());
    cols.push("J_accum".into());
    cols.join(",")
}

struct CsvWriter<W: Write> {
    out: W,
    prev: Option<(f64, f64)>, // (t, incremental cost) of the previous row
    j_accum: f64,
}

impl<W: Write> CsvWriter<W> {
    fn row(
        &mut self,
        cost: &QuadraticTrackingCost,
        t: f64,
        x: &StateVec,
        u: &ControlVec,
        location: usize,
    ) -> Result<()> {
        let l = cost.incremental_cost(t, x);
        if let Some((tp, lp)) = self.prev {
            self.j_accum += 0.5 * (t - tp) * (l + lp);
        }
        self.prev = Some((t, l));
        let mut cols = vec![fmt(t)];
        for v in x.iter() {
            if !v.is_finite() {
                return Err(SacError::NonFinite {
                    context: "trajectory row".into(),
                    time: t,
                });
            }
            cols.push(fmt(*v));
        }
        for v in u.iter() {
            cols.push(fmt(*v));
        }
        cols.push(location.to_string());
        cols.push(fmt(self.j_accum));
        writeln!(self.out, "{}", cols.join(","))
            .map_err(|e| SacError::Config(format!("csv write: {e}")))?;
        Ok(())
    }
}

/// Writes a smooth trajectory as CSV (location fixed at 0). Returns the row
/// count and the accumulated running cost.
pub fn write_smooth_csv<W: Write>(
    mut out: W,
    traj: &Trajectory,
    cost: &QuadraticTrackingCost,
    n: usize,
    m: usize,
) -> Result<(usize, f64)> {
    writeln!(out, "{}", csv_header(n, m))
        .map_err(|e| SacError::Config(format!("csv write: {e}")))?;
    let mut w = CsvWriter {
        out,
        prev: None,
        j_accum: 0.0,
    };
    for i in 0..traj.len() {
        w.row(cost, traj.times[i], &traj.states[i], &traj.controls[i], 0)?;
    }
    Ok((traj.len(), w.j_accum))
}

/// Writes a hybrid trajectory as CSV; transition instants appear twice, as
/// the last row of one segment and the first of the next.
pub fn write_hybrid_csv<W: Write>(
    mut out: W,
    ht: &HybridTrajectory,
    cost: &QuadraticTrackingCost,
    n: usize,
    m: usize,
) -> Result<(usize, f64)> {
    writeln!(out, "{}", csv_header(n, m))
        .map_err(|e| SacError::Config(format!("csv write: {e}")))?;
    let mut w = CsvWriter {
        out,
        prev: None,
        j_accum: 0.0,
    };
    let mut rows = 0;
    for (q, seg) in &ht.segments {
        for i in 0..seg.len() {
            w.row(cost, seg.times[i], &seg.states[i], &seg.controls[i], *q)?;
            rows += 1;
        }
    }
    Ok((rows, w.j_accum))
}
