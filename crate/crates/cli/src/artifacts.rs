//! Artifact files: run-log, measurement, surface, trace, checkpoint, and
//! plot CSVs, plus the one-line run summaries.
//!
//! Floats are written with Rust's shortest round-trip formatting and rows
//! follow the core's deterministic iteration order, so every file is a pure
//! function of (config, seed): re-running a config must reproduce each
//! artifact byte for byte. Cells for quantities a record lacks (gold between
//! probes, multipliers of unconstrained methods) stay empty rather than
//! shifting columns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use proxylab_core::envs::GoodhartSpec;
use proxylab_core::lagrange::ConstraintMode;
use proxylab_core::neldermead::{NmOutcome, NmTraceRecord};
use proxylab_core::proxyfit::{
    kde_density, monomial_exponents, monomial_name, EvalSurface, MeasurementSet,
};
use proxylab_core::trainer::{MethodKind, MethodSpec, RunLog, TrainState};

use crate::error::CliError;

/// Final learned state of a run, for a restartable record of where the
/// policy ended up.
pub struct Checkpoint {
    pub policy_weights: Vec<f64>,
    pub value_weights: Vec<Vec<f64>>,
    pub multiplier_raw: Vec<f64>,
    pub multiplier_buffer: Vec<f64>,
    pub kl_coef: f64,
    pub env_steps: usize,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let (multiplier_raw, multiplier_buffer) = match state.lagrange() {
            Some(l) => (l.raw().to_vec(), l.momentum_buffer().to_vec()),
            None => (Vec::new(), Vec::new()),
        };
        Checkpoint {
            policy_weights: state.policy().weights().to_vec(),
            value_weights: state.heads().weights().to_vec(),
            multiplier_raw,
            multiplier_buffer,
            kl_coef: state.kl_coef(),
            env_steps: state.env_steps(),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn push_cell(line: &mut String, value: Option<f64>) {
    match value {
        Some(v) => {
            let _ = write!(line, ",{v}");
        }
        None => line.push(','),
    }
}

/// One row per completed update round. Optional quantities get empty cells
/// on rounds (or methods) that lack them.
pub fn write_runlog(path: &Path, num_channels: usize, log: &RunLog) -> Result<(), CliError> {
    let n = num_channels;
    let mut out = String::new();
    out.push_str("update_index,env_steps");
    for i in 1..=n {
        let _ = write!(out, ",value_{i}");
    }
    out.push_str(",kl_value,gold");
    for i in 1..=n {
        let _ = write!(out, ",probe_value_{i}");
    }
    for i in 1..=n {
        let _ = write!(out, ",multiplier_raw_{i}");
    }
    for i in 1..=n {
        let _ = write!(out, ",multiplier_weight_{i}");
    }
    for i in 1..=n {
        let _ = write!(out, ",violation_{i}");
    }
    out.push_str(",kl_coef,policy_loss,value_loss_task");
    for i in 1..=n {
        let _ = write!(out, ",value_loss_{i}");
    }
    out.push('\n');

    for r in &log.records {
        let _ = write!(out, "{},{}", r.update_index, r.env_steps);
        for i in 0..n {
            push_cell(&mut out, Some(r.values[i]));
        }
        push_cell(&mut out, Some(r.kl_value));
        push_cell(&mut out, r.gold);
        for i in 0..n {
            push_cell(&mut out, r.probe_values.as_ref().map(|v| v[i]));
        }
        for i in 0..n {
            push_cell(&mut out, r.multiplier_raw.get(i).copied());
        }
        for i in 0..n {
            push_cell(&mut out, r.multiplier_weights.get(i).copied());
        }
        for i in 0..n {
            push_cell(&mut out, r.violations.get(i).copied());
        }
        push_cell(&mut out, r.kl_coef);
        push_cell(&mut out, Some(r.policy_loss));
        push_cell(&mut out, Some(r.value_losses[0]));
        for i in 0..n {
            push_cell(&mut out, r.value_losses.get(i + 1).copied());
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Long-format dump of the final learned parameters: policy and value-head
/// weights, multiplier state, KL coefficient, and the step counter.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    let mut out = String::from("section,head,index,value\n");
    for (i, w) in ckpt.policy_weights.iter().enumerate() {
        let _ = writeln!(out, "policy,0,{i},{w}");
    }
    for (h, head) in ckpt.value_weights.iter().enumerate() {
        for (i, w) in head.iter().enumerate() {
            let _ = writeln!(out, "value,{h},{i},{w}");
        }
    }
    for (i, w) in ckpt.multiplier_raw.iter().enumerate() {
        let _ = writeln!(out, "multiplier_raw,0,{i},{w}");
    }
    for (i, w) in ckpt.multiplier_buffer.iter().enumerate() {
        let _ = writeln!(out, "multiplier_buffer,0,{i},{w}");
    }
    let _ = writeln!(out, "kl_coef,0,0,{}", ckpt.kl_coef);
    let _ = writeln!(out, "env_steps,0,0,{}", ckpt.env_steps);
    write_file(path, &out)
}

/// Pooled measurement rows: channel values and the gold score seen there.
pub fn write_measurements(path: &Path, set: &MeasurementSet) -> Result<(), CliError> {
    let mut out = String::new();
    for i in 1..=set.num_channels() {
        if i > 1 {
            out.push(',');
        }
        let _ = write!(out, "value_{i}");
    }
    out.push_str(",gold\n");
    for row in set.rows() {
        for (i, v) in row.values.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        let _ = writeln!(out, ",{}", row.gold);
    }
    write_file(path, &out)
}

/// Grid dump of the fitted surface: node coordinates, fitted value, kernel
/// density, and whether the node passed the density mask.
pub fn write_surface(
    path: &Path,
    surface: &EvalSurface,
    measurements: &MeasurementSet,
) -> Result<(), CliError> {
    let n = surface.num_channels();
    let mut out = String::new();
    for i in 1..=n {
        if i > 1 {
            out.push(',');
        }
        let _ = write!(out, "value_{i}");
    }
    out.push_str(",fit,density,mask\n");
    let grid = surface.grid();
    for flat in 0..grid.num_nodes() {
        let coords = grid.node_coords(flat);
        for (i, c) in coords.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{c}");
        }
        let fit = surface.evaluate(&coords);
        let density = kde_density(measurements, surface.bandwidth(), &coords);
        let mask = u8::from(surface.mask()[flat]);
        let _ = writeln!(out, ",{fit},{density},{mask}");
    }
    write_file(path, &out)
}

/// Polynomial coefficients by monomial name, in the fit's basis order.
pub fn write_coefficients(path: &Path, surface: &EvalSurface) -> Result<(), CliError> {
    let mut out = String::from("monomial,coefficient\n");
    let exponents = monomial_exponents(surface.num_channels(), surface.degree());
    for (e, c) in exponents.iter().zip(surface.coefficients()) {
        let _ = writeln!(out, "{},{c}", monomial_name(e));
    }
    write_file(path, &out)
}

/// The masked-argmax proxy point and its fitted value, one row.
pub fn write_proxy_point(path: &Path, point: &[f64], value: f64) -> Result<(), CliError> {
    let mut out = String::new();
    for i in 1..=point.len() {
        if i > 1 {
            out.push(',');
        }
        let _ = write!(out, "value_{i}");
    }
    out.push_str(",fit\n");
    for (i, v) in point.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
    let _ = writeln!(out, ",{value}");
    write_file(path, &out)
}

/// Simplex search trace: one row per evaluated proposal, with the full
/// simplex after the observation flattened into per-vertex columns.
pub fn write_trace(
    path: &Path,
    num_channels: usize,
    trace: &[NmTraceRecord],
) -> Result<(), CliError> {
    let n = num_channels;
    let mut out = String::from("proposal_index,phase");
    for i in 1..=n {
        let _ = write!(out, ",point_{i}");
    }
    out.push_str(",gold,capped,cache_hit,budget_used");
    for v in 0..=n {
        for i in 1..=n {
            let _ = write!(out, ",vertex{v}_{i}");
        }
        let _ = write!(out, ",vertex{v}_gold");
    }
    out.push('\n');

    for r in trace {
        let _ = write!(out, "{},{}", r.proposal_index, r.phase.name());
        for c in &r.point {
            let _ = write!(out, ",{c}");
        }
        let _ = write!(
            out,
            ",{},{},{},{}",
            r.gold,
            u8::from(r.capped),
            u8::from(r.cache_hit),
            r.budget_used
        );
        for v in 0..=n {
            for i in 0..n {
                push_cell(&mut out, r.simplex.get(v).map(|p| p[i]));
            }
            push_cell(&mut out, r.simplex_gold.get(v).copied());
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Sweep manifest mapping weighting indices to their reward weights.
pub fn write_weightings(path: &Path, weightings: &[Vec<f64>]) -> Result<(), CliError> {
    let n = weightings.first().map_or(0, Vec::len);
    let mut out = String::from("weighting");
    for i in 1..=n {
        let _ = write!(out, ",w_{i}");
    }
    out.push('\n');
    for (j, w) in weightings.iter().enumerate() {
        let _ = write!(out, "{j}");
        for x in w {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    write_file(path, &out)
}

// ---------------------------------------------------------------------------
// Reading artifacts back (for `plotdata`).

/// Parses one of our own CSVs: a header row plus unquoted cells.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let cells = line.split(',').map(str::to_owned).collect::<Vec<_>>();
        if cells.len() != header.len() {
            return Err(CliError::Config(format!(
                "{} line {}: {} cells for {} columns",
                path.display(),
                lineno + 2,
                cells.len(),
                header.len()
            )));
        }
        rows.push(cells);
    }
    Ok((header, rows))
}

/// Column index lookup with a named diagnostic.
pub fn column(header: &[String], name: &str, path: &Path) -> Result<usize, CliError> {
    header.iter().position(|h| h == name).ok_or_else(|| {
        CliError::Config(format!("{}: missing column '{name}'", path.display()))
    })
}

/// Sample mean and standard error (n−1 denominator); a single sample has
/// standard error 0.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Summary lines.

fn fmt_vec(values: &[f64]) -> String {
    let mut s = String::from("[");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{v:.4}");
    }
    s.push(']');
    s
}

/// The run's final channel values: the last fixed-seed probe if one exists,
/// otherwise the last round's sample means.
pub fn final_values(log: &RunLog) -> Option<Vec<f64>> {
    log.records
        .iter()
        .rev()
        .find_map(|r| r.probe_values.clone())
        .or_else(|| log.records.last().map(|r| r.values.clone()))
}

/// The run's final gold evaluation (last probe round).
pub fn final_gold(log: &RunLog) -> Option<f64> {
    log.records.iter().rev().find_map(|r| r.gold)
}

/// Worst constraint violation at the final values, with the mode-specific
/// satisfaction tolerance: equalities allow |v−θ| ≤ 0.05, inequalities
/// 0.025 of slack on the wrong side.
fn constraint_status(method: &MethodSpec, values: &[f64]) -> String {
    if !method.kind().is_constrained() {
        return "constraints none".into();
    }
    let (mode, tol) = match method.kind() {
        MethodKind::XiPpo => (ConstraintMode::Equality, 0.05),
        MethodKind::MuPpo => (ConstraintMode::InequalityGe, 0.025),
        _ => (ConstraintMode::InequalityLe, 0.025),
    };
    let worst = values
        .iter()
        .zip(method.thresholds())
        .map(|(&v, &t)| match mode {
            ConstraintMode::Equality => (v - t).abs(),
            other => other.violation(v, t),
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let verdict = if worst <= tol { "ok" } else { "violated" };
    format!("constraints worst {worst:+.4} (tol {tol}, {verdict})")
}

/// The pinned one-line report: final gold evaluation, final channel values,
/// constraint status, plus the abort reason if the run died early.
pub fn run_summary(label: &str, seed: u64, method: &MethodSpec, log: &RunLog) -> String {
    let mut line = format!("{label} seed {seed}: {}", log.method.name());
    match (final_gold(log), final_values(log)) {
        (Some(gold), Some(values)) => {
            let _ = write!(
                line,
                ", final gold {gold:.4}, values {}, {}",
                fmt_vec(&values),
                constraint_status(method, &values)
            );
        }
        _ => line.push_str(", no completed rounds"),
    }
    if let Some(reason) = &log.aborted {
        let _ = write!(line, ", aborted: {reason}");
    }
    line
}

pub fn phase1_summary(
    seed: u64,
    rows: usize,
    surface: &EvalSurface,
    point: &[f64],
    value: f64,
    env: &GoodhartSpec,
) -> String {
    let feasible = surface.mask().iter().filter(|&&m| m).count();
    format!(
        "phase1 seed {seed}: proxy point {} (fit {value:.4}, gold there {:.4}), {rows} rows, \
         mask {feasible}/{} nodes",
        fmt_vec(point),
        env.gold_at(point),
        surface.grid().num_nodes()
    )
}

pub fn nm_summary(seed: u64, outcome: &NmOutcome, budget: usize) -> String {
    let used = outcome.trace.last().map_or(0, |r| r.budget_used);
    let mut line = format!(
        "nm_search seed {seed}: best point {} (gold {:.4}), {} proposals, budget {used}/{budget}",
        fmt_vec(&outcome.best_point),
        outcome.best_gold,
        outcome.trace.len()
    );
    if let Some(reason) = outcome.run_log.as_ref().and_then(|l| l.aborted.as_ref()) {
        let _ = write!(line, ", aborted: {reason}");
    }
    line
}
