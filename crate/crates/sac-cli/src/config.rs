//! Experiment configuration: a TOML tree with the benchmark name, run
//! settings, and key=value parameter overrides applied on top of the
//! built-in benchmark defaults.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::collections::BTreeMap;

use sac::benchmarks::Benchmark;
use sac::control::AlphaMode;
use sac::{Result, SacError};

#[derive(Debug, Deserialize, Default)]
pub struct ExperimentConfig {
    pub benchmark: Option<String>,
    pub duration: Option<f64>,
    pub out: Option<String>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Value>,
}

impl ExperimentConfig {
    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SacError::Usage(format!("cannot read config '{path}': {e}")))?;
        toml::from_str(&text).map_err(|e| SacError::Usage(format!("bad config '{path}': {e}")))
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| SacError::Usage(format!("override '{key}': '{value}' is not a number")))
}

fn parse_vec(key: &str, value: &str) -> Result<DVector<f64>> {
    let entries: Result<Vec<f64>> = value.split(',').map(|s| parse_f64(key, s)).collect();
    Ok(DVector::from_vec(entries?))
}

/// Applies one `key=value` override to a wired benchmark. Vector-valued
/// settings take comma-separated lists.
pub fn apply_override(b: &mut Benchmark, key: &str, value: &str) -> Result<()> {
    match key {
        "duration" => b.duration = parse_f64(key, value)?,
        "plant_dt" => b.plant_dt = parse_f64(key, value)?,
        "x0" => {
            let v = parse_vec(key, value)?;
            if v.len() != b.x0.len() {
                return Err(SacError::Usage(format!(
                    "override 'x0': expected {} entries, got {}",
                    b.x0.len(),
                    v.len()
                )));
            }
            b.x0 = v;
        }
        "params.horizon" => b.params.horizon = parse_f64(key, value)?,
        "params.ts" => b.params.ts = parse_f64(key, value)?,
        "params.t_calc" => b.params.t_calc = parse_f64(key, value)?,
        "params.pred_dt" => b.params.pred_dt = parse_f64(key, value)?,
        "params.beta" => b.params.beta = parse_f64(key, value)?,
        "params.omega" => b.params.omega = parse_f64(key, value)?,
        "params.dt_init" => b.params.dt_init = parse_f64(key, value)?,
        "params.lambda_min" => b.params.lambda_min = parse_f64(key, value)?,
        "params.delta_j_min" => b.params.delta_j_min = parse_f64(key, value)?,
        "params.max_backtracks" => {
            b.params.max_backtracks = value.trim().parse::<usize>().map_err(|_| {
                SacError::Usage(format!("override '{key}': '{value}' is not an integer"))
            })?
        }
        "params.time_search" => {
            b.params.time_search = value.trim().parse::<bool>().map_err(|_| {
                SacError::Usage(format!("override '{key}': '{value}' is not a bool"))
            })?
        }
        "params.gamma" => b.params.alpha = AlphaMode::Feedback {
            gamma: parse_f64(key, value)?,
        },
        "params.alpha_d" => b.params.alpha = AlphaMode::Fixed(parse_f64(key, value)?),
        "params.r" => {
            let v = parse_vec(key, value)?;
            b.params.r = DMatrix::from_diagonal(&v);
        }
        "params.u_min" => b.params.u_min = parse_vec(key, value)?,
        "params.u_max" => b.params.u_max = parse_vec(key, value)?,
        other => {
            return Err(SacError::Usage(format!("unknown override key '{other}'")));
        }
    }
    Ok(())
}

/// Renders a TOML override value into the plain string form `apply_override`
/// parses (arrays become comma-separated lists).
pub fn value_to_string(v: &toml::Value) -> String {
    match v {
        toml::Value::Array(items) => items
            .iter()
            .map(value_to_string)
            .collect::<Vec<_>>()
            .join(","),
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
