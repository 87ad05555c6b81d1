//! The experiment phases behind each subcommand, and the tidy-CSV exporter.
//!
//! Every phase loops its seeds fail-fast: artifacts and the one-line summary
//! for a failing run are still written before the error (and its exit code)
//! propagates, so a blown-up run leaves its partial log behind for
//! inspection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use proxylab_core::envs::GoodhartSpec;
use proxylab_core::neldermead::{nm_search, NmConfig};
use proxylab_core::proxyfit::{EvalSurface, GridSpec, MeasurementRow, MeasurementSet};
use proxylab_core::trainer::{MethodKind, MethodSpec, RunLog, TrainConfig, TrainError, TrainState};

use crate::artifacts::{self, Checkpoint};
use crate::config::Experiment;
use crate::error::CliError;

/// Which tidy dataset `plotdata` emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Gold evaluation alongside probed channel values over training
    /// (read from a directory of per-seed run logs).
    GoldVsValue,
    /// Per-channel sample means against steps, with threshold constants.
    ValuesVsStep,
    /// Fitted-surface grids with their density masks, one file per seed.
    SurfaceGrid,
    /// Simplex search paths with the running best gold, one file per seed.
    SearchPath,
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Runs one training configuration to completion, mirroring the core's
/// single-run loop but keeping the final state for a checkpoint. A
/// non-finite loss stops the run and is reported in the log rather than as
/// an error, so partial artifacts can still be written.
fn run_with_checkpoint(
    env: &GoodhartSpec,
    method: &MethodSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<(RunLog, Checkpoint), CliError> {
    let mut state = TrainState::new(env, method, config, seed)?;
    let rounds = config.num_rounds();
    let mut records = Vec::with_capacity(rounds);
    let mut aborted = None;
    for round in 1..=rounds {
        let probe = (round - 1) % config.probe_every == 0 || round == rounds;
        match state.run_round(env, method, config, probe) {
            Ok(record) => records.push(record),
            Err(TrainError::NumericalAbort(reason)) => {
                aborted = Some(reason);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let checkpoint = Checkpoint::from_state(&state);
    Ok((RunLog { method: method.kind(), records, aborted }, checkpoint))
}

/// Writes a run's artifacts under `dir` with the given file stem.
fn persist_run(
    dir: &Path,
    stem: &str,
    num_channels: usize,
    log: &RunLog,
    checkpoint: &Checkpoint,
) -> Result<(), CliError> {
    artifacts::write_runlog(&dir.join(format!("{stem}runlog.csv")), num_channels, log)?;
    artifacts::write_checkpoint(&dir.join(format!("{stem}checkpoint.csv")), checkpoint)?;
    if let Some(reason) = &log.aborted {
        let path = dir.join(format!("{stem}aborted.txt"));
        fs::write(&path, format!("{reason}\n")).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

fn fail_on_abort(log: &RunLog) -> Result<(), CliError> {
    match &log.aborted {
        Some(reason) => Err(CliError::Abort(reason.clone())),
        None => Ok(()),
    }
}

pub fn train(exp: &Experiment) -> Result<(), CliError> {
    let n = exp.env.num_channels();
    for &seed in &exp.seeds {
        let dir = exp.out.join("train").join(format!("seed{seed}"));
        create_dir(&dir)?;
        let (log, checkpoint) = run_with_checkpoint(&exp.env, &exp.method, &exp.train, seed)?;
        persist_run(&dir, "", n, &log, &checkpoint)?;
        println!("{}", artifacts::run_summary("train", seed, &exp.method, &log));
        fail_on_abort(&log)?;
    }
    Ok(())
}

/// One phase-1 replication: a single-channel measurement run per channel
/// (run seed `base + channel`), pooled probe rows, the fitted and masked
/// surface, and its argmax. All artifacts land in `dir`; on failure,
/// everything gathered so far is written before the error propagates.
fn phase1_for_seed(
    exp: &Experiment,
    base_seed: u64,
    dir: &Path,
) -> Result<(MeasurementSet, EvalSurface, Vec<f64>, f64), CliError> {
    let n = exp.env.num_channels();
    create_dir(dir)?;
    let mut measurements = MeasurementSet::new(n);
    for channel in 0..n {
        let mut weights = vec![0.0; n];
        weights[channel] = 1.0;
        let method = MethodSpec::ppo_no_kl(weights);
        let seed = base_seed + channel as u64;
        let (log, checkpoint) = run_with_checkpoint(&exp.env, &method, &exp.train, seed)?;
        for record in &log.records {
            if let (Some(values), Some(gold)) = (&record.probe_values, record.gold) {
                measurements
                    .push(MeasurementRow { values: values.clone(), gold })
                    .expect("probe arity matches the environment");
            }
        }
        persist_run(dir, &format!("channel{channel}_"), n, &log, &checkpoint)?;
        let label = format!("phase1 channel {channel}");
        println!("{}", artifacts::run_summary(&label, seed, &method, &log));
        if log.aborted.is_some() {
            artifacts::write_measurements(&dir.join("measurements.csv"), &measurements)?;
            fail_on_abort(&log)?;
        }
    }
    artifacts::write_measurements(&dir.join("measurements.csv"), &measurements)?;

    let grid = GridSpec::unit(n, exp.surface.grid_resolution)
        .map_err(|e| CliError::Config(format!("[surface].grid_resolution: {e}")))?;
    let surface = EvalSurface::build(
        &measurements,
        exp.surface.degree,
        grid,
        exp.surface.bandwidth,
        exp.surface.density_threshold,
    )?;
    artifacts::write_surface(&dir.join("surface.csv"), &surface, &measurements)?;
    artifacts::write_coefficients(&dir.join("coefficients.csv"), &surface)?;
    let (point, value) = surface.argmax()?;
    artifacts::write_proxy_point(&dir.join("proxy_point.csv"), &point, value)?;
    Ok((measurements, surface, point, value))
}

pub fn phase1(exp: &Experiment) -> Result<(), CliError> {
    for &seed in &exp.seeds {
        let dir = exp.out.join("phase1").join(format!("seed{seed}"));
        let (measurements, surface, point, value) = phase1_for_seed(exp, seed, &dir)?;
        println!(
            "{}",
            artifacts::phase1_summary(seed, measurements.len(), &surface, &point, value, &exp.env)
        );
    }
    Ok(())
}

pub fn two_phase(exp: &Experiment) -> Result<(), CliError> {
    let n = exp.env.num_channels();
    for &seed in &exp.seeds {
        let base = exp.out.join("two_phase").join(format!("seed{seed}"));
        let (measurements, surface, point, value) =
            phase1_for_seed(exp, seed, &base.join("phase1"))?;
        println!(
            "{}",
            artifacts::phase1_summary(seed, measurements.len(), &surface, &point, value, &exp.env)
        );

        let method = exp.two_phase.spec(point.clone());
        method.validate(n).map_err(|e| CliError::Config(format!("fitted proxy point: {e}")))?;
        // Phase 1 consumed seeds base..base+n, so the constrained run takes
        // the next one.
        let phase2_seed = seed + n as u64;
        let (log, checkpoint) = run_with_checkpoint(&exp.env, &method, &exp.train, phase2_seed)?;
        persist_run(&base, "phase2_", n, &log, &checkpoint)?;
        println!("{}", artifacts::run_summary("two_phase phase2", phase2_seed, &method, &log));
        fail_on_abort(&log)?;
    }
    Ok(())
}

pub fn nm(exp: &Experiment) -> Result<(), CliError> {
    let n = exp.env.num_channels();
    for &seed in &exp.seeds {
        let dir = exp.out.join("nm_search").join(format!("seed{seed}"));
        create_dir(&dir)?;
        let nm_config = NmConfig { seed, ..exp.nm.clone() };
        let outcome = nm_search(&exp.env, &exp.train, &nm_config)?;
        artifacts::write_trace(&dir.join("trace.csv"), n, &outcome.trace)?;
        if let Some(log) = &outcome.run_log {
            artifacts::write_runlog(&dir.join("runlog.csv"), n, log)?;
        }
        println!("{}", artifacts::nm_summary(seed, &outcome, nm_config.total_budget));
        if let Some(log) = &outcome.run_log {
            fail_on_abort(log)?;
        }
    }
    Ok(())
}

pub fn sweep(exp: &Experiment) -> Result<(), CliError> {
    let n = exp.env.num_channels();
    let base_kind = exp.method.kind();
    if !matches!(base_kind, MethodKind::Ppo | MethodKind::PpoNoKl) {
        return Err(CliError::Config(format!(
            "[method].kind: sweep varies fixed reward weights, so it needs ppo or ppo_no_kl \
             (got {})",
            base_kind.name()
        )));
    }
    let root = exp.out.join("sweep");
    create_dir(&root)?;
    artifacts::write_weightings(&root.join("weightings.csv"), &exp.weightings)?;
    for (j, weights) in exp.weightings.iter().enumerate() {
        let method = match base_kind {
            MethodKind::PpoNoKl => MethodSpec::ppo_no_kl(weights.clone()),
            _ => MethodSpec::ppo(
                weights.clone(),
                exp.method.kl_coef_init(),
                exp.method.kl_target(),
                exp.method.kl_lr(),
            ),
        };
        for &seed in &exp.seeds {
            let dir = root.join(format!("weighting{j}")).join(format!("seed{seed}"));
            create_dir(&dir)?;
            let (log, checkpoint) = run_with_checkpoint(&exp.env, &method, &exp.train, seed)?;
            persist_run(&dir, "", n, &log, &checkpoint)?;
            let label = format!("sweep weighting {j}");
            println!("{}", artifacts::run_summary(&label, seed, &method, &log));
            fail_on_abort(&log)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plotdata: tidy CSVs for plotting, read back from run artifacts.

/// Seed subdirectories of an artifact directory, sorted by seed so output
/// column order is reproducible.
fn seed_dirs(dir: &Path) -> Result<Vec<(u64, PathBuf)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut seeds = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name();
        if let Some(seed) = name.to_str().and_then(|s| s.strip_prefix("seed")) {
            if let Ok(seed) = seed.parse::<u64>() {
                seeds.push((seed, entry.path()));
            }
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no seed<N> directories to aggregate",
            dir.display()
        )));
    }
    seeds.sort_unstable_by_key(|(seed, _)| *seed);
    Ok(seeds)
}

fn parse_cell(cell: &str, path: &Path) -> Result<f64, CliError> {
    cell.parse::<f64>().map_err(|_| {
        CliError::Config(format!("{}: cell '{cell}' is not a number", path.display()))
    })
}

/// Columns named `<prefix>1..N` in order; N is inferred from the header.
fn indexed_columns(header: &[String], prefix: &str) -> Vec<usize> {
    let mut found: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(col, h)| {
            let idx: usize = h.strip_prefix(prefix)?.parse().ok()?;
            Some((idx, col))
        })
        .collect();
    found.sort_unstable();
    found.into_iter().map(|(_, col)| col).collect()
}

/// Per-seed series keyed by step count: channel values plus an optional
/// extra column (gold), restricted to rows where the extras exist.
type SeriesMap = BTreeMap<usize, (Vec<f64>, f64)>;

fn read_series(
    path: &Path,
    value_prefix: &str,
    with_gold: bool,
) -> Result<(usize, SeriesMap), CliError> {
    let (header, rows) = artifacts::read_csv(path)?;
    let steps_col = artifacts::column(&header, "env_steps", path)?;
    let value_cols = indexed_columns(&header, value_prefix);
    if value_cols.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no {value_prefix}N columns",
            path.display()
        )));
    }
    let gold_col = if with_gold { Some(artifacts::column(&header, "gold", path)?) } else { None };
    let mut series = SeriesMap::new();
    for row in &rows {
        let gold = match gold_col {
            Some(col) if row[col].is_empty() => continue,
            Some(col) => parse_cell(&row[col], path)?,
            None => 0.0,
        };
        if value_cols.iter().any(|&c| row[c].is_empty()) {
            continue;
        }
        let steps = row[steps_col].parse::<usize>().map_err(|_| {
            CliError::Config(format!("{}: bad env_steps '{}'", path.display(), row[steps_col]))
        })?;
        let values = value_cols
            .iter()
            .map(|&c| parse_cell(&row[c], path))
            .collect::<Result<Vec<_>, _>>()?;
        series.insert(steps, (values, gold));
    }
    Ok((value_cols.len(), series))
}

/// Step counts present in every seed's series, ascending.
fn common_steps(per_seed: &[(u64, SeriesMap)]) -> Vec<usize> {
    let (_, first) = &per_seed[0];
    first
        .keys()
        .copied()
        .filter(|step| per_seed.iter().all(|(_, s)| s.contains_key(step)))
        .collect()
}

fn push_mean_stderr(line: &mut String, samples: &[f64]) {
    let (mean, stderr) = artifacts::mean_stderr(samples);
    let _ = write!(line, ",{mean},{stderr}");
}

fn gold_vs_value(exp: &Experiment, from: &Path, out: &Path) -> Result<(), CliError> {
    let n = exp.env.num_channels();
    let mut per_seed = Vec::new();
    for (seed, dir) in seed_dirs(from)? {
        let path = dir.join("runlog.csv");
        let (cols, series) = read_series(&path, "probe_value_", true)?;
        if cols != n {
            return Err(CliError::Config(format!(
                "{}: {cols} channels in log, {n} in config",
                path.display()
            )));
        }
        per_seed.push((seed, series));
    }

    let mut text = String::from("env_steps");
    for i in 0..n {
        for (seed, _) in &per_seed {
            let _ = write!(text, ",value_{}_seed{seed}", i + 1);
        }
    }
    for (seed, _) in &per_seed {
        let _ = write!(text, ",gold_seed{seed}");
    }
    for i in 1..=n {
        let _ = write!(text, ",value_{i}_mean,value_{i}_stderr");
    }
    text.push_str(",gold_mean,gold_stderr\n");

    for step in common_steps(&per_seed) {
        let _ = write!(text, "{step}");
        for i in 0..n {
            for (_, series) in &per_seed {
                let _ = write!(text, ",{}", series[&step].0[i]);
            }
        }
        for (_, series) in &per_seed {
            let _ = write!(text, ",{}", series[&step].1);
        }
        for i in 0..n {
            let samples: Vec<f64> = per_seed.iter().map(|(_, s)| s[&step].0[i]).collect();
            push_mean_stderr(&mut text, &samples);
        }
        let golds: Vec<f64> = per_seed.iter().map(|(_, s)| s[&step].1).collect();
        push_mean_stderr(&mut text, &golds);
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| CliError::io(out, e))
}

fn values_vs_step(exp: &Experiment, from: &Path, out: &Path) -> Result<(), CliError> {
    let n = exp.env.num_channels();
    let mut per_seed = Vec::new();
    for (seed, dir) in seed_dirs(from)? {
        let path = dir.join("runlog.csv");
        let (cols, series) = read_series(&path, "value_", false)?;
        if cols != n {
            return Err(CliError::Config(format!(
                "{}: {cols} channels in log, {n} in config",
                path.display()
            )));
        }
        per_seed.push((seed, series));
    }
    let thresholds = exp.method.thresholds();

    let mut text = String::from("env_steps");
    for i in 0..n {
        for (seed, _) in &per_seed {
            let _ = write!(text, ",value_{}_seed{seed}", i + 1);
        }
    }
    for i in 1..=n {
        let _ = write!(text, ",value_{i}_mean,value_{i}_stderr");
    }
    for i in 1..=thresholds.len() {
        let _ = write!(text, ",threshold_{i}");
    }
    text.push('\n');

    for step in common_steps(&per_seed) {
        let _ = write!(text, "{step}");
        for i in 0..n {
            for (_, series) in &per_seed {
                let _ = write!(text, ",{}", series[&step].0[i]);
            }
        }
        for i in 0..n {
            let samples: Vec<f64> = per_seed.iter().map(|(_, s)| s[&step].0[i]).collect();
            push_mean_stderr(&mut text, &samples);
        }
        for t in thresholds {
            let _ = write!(text, ",{t}");
        }
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| CliError::io(out, e))
}

fn surface_grid(from: &Path, out_dir: &Path) -> Result<(), CliError> {
    for (seed, dir) in seed_dirs(from)? {
        let src = dir.join("surface.csv");
        let dst = out_dir.join(format!("surface-grid_seed{seed}.csv"));
        fs::copy(&src, &dst).map_err(|e| CliError::io(&src, e))?;
    }
    Ok(())
}

fn search_path(from: &Path, out_dir: &Path) -> Result<(), CliError> {
    for (seed, dir) in seed_dirs(from)? {
        let path = dir.join("trace.csv");
        let (header, rows) = artifacts::read_csv(&path)?;
        let point_cols = indexed_columns(&header, "point_");
        let phase_col = artifacts::column(&header, "phase", &path)?;
        let index_col = artifacts::column(&header, "proposal_index", &path)?;
        let gold_col = artifacts::column(&header, "gold", &path)?;
        let budget_col = artifacts::column(&header, "budget_used", &path)?;

        let mut text = String::from("proposal_index,phase");
        for i in 1..=point_cols.len() {
            let _ = write!(text, ",point_{i}");
        }
        text.push_str(",gold,best_gold,budget_used\n");
        let mut best = f64::NEG_INFINITY;
        for row in &rows {
            let gold = parse_cell(&row[gold_col], &path)?;
            best = best.max(gold);
            let _ = write!(text, "{},{}", row[index_col], row[phase_col]);
            for &c in &point_cols {
                let _ = write!(text, ",{}", row[c]);
            }
            let _ = writeln!(text, ",{},{best},{}", row[gold_col], row[budget_col]);
        }
        let dst = out_dir.join(format!("search-path_seed{seed}.csv"));
        fs::write(&dst, text).map_err(|e| CliError::io(&dst, e))?;
    }
    Ok(())
}

pub fn plotdata(exp: &Experiment, kind: PlotKind, from: Option<PathBuf>) -> Result<(), CliError> {
    let from = from.unwrap_or_else(|| {
        exp.out.join(match kind {
            PlotKind::GoldVsValue | PlotKind::ValuesVsStep => "train",
            PlotKind::SurfaceGrid => "phase1",
            PlotKind::SearchPath => "nm_search",
        })
    });
    let out_dir = exp.out.join("plotdata");
    create_dir(&out_dir)?;
    match kind {
        PlotKind::GoldVsValue => {
            let out = out_dir.join("gold-vs-value.csv");
            gold_vs_value(exp, &from, &out)?;
            println!("plotdata gold-vs-value: wrote {}", out.display());
        }
        PlotKind::ValuesVsStep => {
            let out = out_dir.join("values-vs-step.csv");
            values_vs_step(exp, &from, &out)?;
            println!("plotdata values-vs-step: wrote {}", out.display());
        }
        PlotKind::SurfaceGrid => {
            surface_grid(&from, &out_dir)?;
            println!("plotdata surface-grid: wrote per-seed grids to {}", out_dir.display());
        }
        PlotKind::SearchPath => {
            search_path(&from, &out_dir)?;
            println!("plotdata search-path: wrote per-seed paths to {}", out_dir.display());
        }
    }
    Ok(())
}
