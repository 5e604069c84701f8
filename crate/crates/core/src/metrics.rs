//! Versioned CSV streams and the run summary.
//!
//! Every CSV starts with a header whose first cell is the schema string;
//! data rows carry a row-kind token in that column.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{SlopeCarParams, ViabilityGrid, ViabilityGridSpec};
use crate::error::{Error, Result};
use crate::orchestrator::{IterationMetrics, LearnedFilter, SafetyFilter, TrainingRecord};
use crate::rl::AgentBundle;

pub const METRICS_SCHEMA: &str = "dynasaur.metrics.v1";
pub const TRAINING_SCHEMA: &str = "dynasaur.training.v1";
pub const FILTER_MAP_SCHEMA: &str = "dynasaur.filter_map.v1";
pub const VIABILITY_SCHEMA: &str = "dynasaur.viability.v1";

pub const METRICS_COLUMNS: [&str; 20] = [
    "j",
    "env_steps_cum",
    "eval_return_mean",
    "eval_return_ci",
    "failures_cum",
    "filter_mean_len",
    "mean_u_norm",
    "lambda1",
    "lambda2",
    "eval_failures_cum",
    "filter_rounds",
    "filter_passed",
    "lambda0",
    "model_holdout_nll",
    "model_data_len",
    "control_failures",
    "mean_penalty",
    "failed_store_len",
    "high_store_len",
    "wall_seconds",
];

fn metrics_header() -> String {
    let mut cells = vec![METRICS_SCHEMA];
    cells.extend(METRICS_COLUMNS);
    cells.join(",")
}

fn metrics_row(m: &IterationMetrics) -> String {
    [
        "iteration".to_string(),
        m.iteration.to_string(),
        m.env_steps_cum.to_string(),
        m.eval_return_mean.to_string(),
        m.eval_return_ci.to_string(),
        m.failures_cum.to_string(),
        m.filter_mean_len.to_string(),
        m.mean_u_norm.to_string(),
        m.lambda1.to_string(),
        m.lambda2.to_string(),
        m.eval_failures_cum.to_string(),
        m.filter_rounds.to_string(),
        u8::from(m.filter_passed).to_string(),
        m.lambda0.to_string(),
        m.model_holdout_nll.to_string(),
        m.model_data_len.to_string(),
        m.control_failures.to_string(),
        m.mean_penalty.to_string(),
        m.failed_store_len.to_string(),
        m.high_store_len.to_string(),
        m.wall_seconds.to_string(),
    ]
    .join(",")
}

/// Append one row, writing the header first if the file is new or empty.
fn append_line(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    } else {
        check_schema(path, header.split(',').next().unwrap_or_default())?;
    }
    writeln!(f, "{row}")?;
    f.flush()?;
    Ok(())
}

fn check_schema(path: &Path, schema: &str) -> Result<()> {
    let mut first = String::new();
    BufReader::new(std::fs::File::open(path)?).read_line(&mut first)?;
    match first.split(',').next() {
        Some(s) if s.trim() == schema => Ok(()),
        other => Err(Error::Config(format!(
            "{}: expected schema {schema}, found {}",
            path.display(),
            other.unwrap_or_default().trim()
        ))),
    }
}

pub fn append_metrics(path: &Path, m: &IterationMetrics) -> Result<()> {
    append_line(path, &metrics_header(), &metrics_row(m))
}

/// Rewrite `path` with exactly these rows.
pub fn write_metrics(path: &Path, rows: &[IterationMetrics]) -> Result<()> {
    let mut text = metrics_header();
    text.push('\n');
    for m in rows {
        text.push_str(&metrics_row(m));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != metrics_header() {
        return Err(Error::Config(format!("{}: not a {METRICS_SCHEMA} file", path.display())));
    }
    let bad = |line: usize, what: &str| Error::Config(format!("{}:{}: bad {what}", path.display(), line + 2));
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != METRICS_COLUMNS.len() + 1 || c[0] != "iteration" {
            return Err(bad(k, "row"));
        }
        let u = |i: usize| c[i].parse::<usize>().map_err(|_| bad(k, METRICS_COLUMNS[i - 1]));
        let f = |i: usize| c[i].parse::<f64>().map_err(|_| bad(k, METRICS_COLUMNS[i - 1]));
        out.push(IterationMetrics {
            iteration: u(1)?,
            env_steps_cum: u(2)?,
            eval_return_mean: f(3)?,
            eval_return_ci: f(4)?,
            failures_cum: u(5)?,
            filter_mean_len: f(6)?,
            mean_u_norm: f(7)?,
            lambda1: f(8)?,
            lambda2: f(9)?,
            eval_failures_cum: u(10)?,
            filter_rounds: u(11)?,
            filter_passed: u(12)? != 0,
            lambda0: f(13)?,
            model_holdout_nll: f(14)?,
            model_data_len: u(15)?,
            control_failures: u(16)?,
            mean_penalty: f(17)?,
            failed_store_len: u(18)?,
            high_store_len: u(19)?,
            wall_seconds: f(20)?,
        });
    }
    Ok(out)
}

pub fn append_training(path: &Path, records: &[TrainingRecord]) -> Result<()> {
    let header = format!(
        "{TRAINING_SCHEMA},phase,iteration,step,critic_loss,actor_objective,mean_u_norm,buffer_len,aux_buffer_len"
    );
    for r in records {
        let row = format!(
            "update,{},{},{},{},{},{},{},{}",
            r.phase, r.iteration, r.step, r.critic_loss, r.actor_objective, r.mean_u_norm, r.buffer_len, r.aux_buffer_len
        );
        append_line(path, &header, &row)?;
    }
    Ok(())
}

/// Machine-readable outcome of a run or an evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: String,
    pub seed: u64,
    pub iterations: usize,
    pub env_steps_cum: usize,
    pub final_return_mean: f64,
    pub final_return_ci: f64,
    pub failures_cum: usize,
    pub eval_failures_cum: usize,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Grid over cart position and pole angle with fixed velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterMapGrid {
    pub x_range: (f64, f64),
    pub theta_range: (f64, f64),
    pub x_cells: usize,
    pub theta_cells: usize,
    pub x_dot: f64,
    pub theta_dot: f64,
}

impl Default for FilterMapGrid {
    fn default() -> Self {
        Self {
            x_range: (-2.4, 2.4),
            theta_range: (-std::f64::consts::PI, std::f64::consts::PI),
            x_cells: 50,
            theta_cells: 50,
            x_dot: 0.0,
            theta_dot: 0.0,
        }
    }
}

fn linspace(range: (f64, f64), n: usize, k: usize) -> f64 {
    if n <= 1 {
        range.0
    } else {
        range.0 + (range.1 - range.0) * k as f64 / (n - 1) as f64
    }
}

/// Rows `(x, θ, ẋ, θ̇, a_lo, a_hi)` of the admissible action interval of the
/// greedy filter of a CartPole agent, `x` varying slowest.
pub fn filter_interval_map(agent: &AgentBundle, grid: &FilterMapGrid) -> Result<Vec<[f64; 6]>> {
    if agent.config.action_dim != 1 {
        return Err(Error::Unsupported(format!(
            "filter maps need a 1-D action, this filter has {}",
            agent.config.action_dim
        )));
    }
    if agent.config.state_dim != 4 {
        return Err(Error::Unsupported("filter maps are defined for CartPole checkpoints".into()));
    }
    let n = grid.x_cells * grid.theta_cells;
    let states = ndarray::Array2::from_shape_fn((n, 4), |(k, d)| {
        let (i, j) = (k / grid.theta_cells, k % grid.theta_cells);
        match d {
            0 => linspace(grid.x_range, grid.x_cells, i),
            1 => grid.x_dot,
            2 => linspace(grid.theta_range, grid.theta_cells, j),
            _ => grid.theta_dot,
        }
    });
    let planes = LearnedFilter(agent).hyperplanes(states.view())?;
    states
        .rows()
        .into_iter()
        .zip(planes)
        .map(|(s, h)| {
            let (lo, hi) = h.map_or(Ok((-1.0, 1.0)), |h| h.interval_1d())?;
            Ok([s[0], s[2], s[1], s[3], lo, hi])
        })
        .collect()
}

pub fn write_filter_map(path: &Path, rows: &[[f64; 6]]) -> Result<()> {
    let mut text = format!("{FILTER_MAP_SCHEMA},x,theta,x_dot,theta_dot,a_lo,a_hi\n");
    for r in rows {
        text.push_str(&format!("cell,{},{},{},{},{},{}\n", r[0], r[1], r[2], r[3], r[4], r[5]));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Dump of the slope-car viability grid with the exact position bound per
/// velocity row.
pub fn write_viability(path: &Path, grid: &ViabilityGrid, params: &SlopeCarParams) -> Result<()> {
    let spec: &ViabilityGridSpec = &grid.spec;
    let mut text = format!("{VIABILITY_SCHEMA},pos,vel,viable,exact_pos_bound\n");
    for j in 0..spec.vel_cells {
        let vel = spec.vel_at(j);
        let bound = crate::env::viable_position_bound(params, vel, spec.horizon, spec.pos_range.0);
        let bound = bound.map_or("nan".to_string(), |b| b.to_string());
        for i in 0..spec.pos_cells {
            text.push_str(&format!("cell,{},{},{},{}\n", spec.pos_at(i), vel, u8::from(grid.at(i, j)), bound));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
