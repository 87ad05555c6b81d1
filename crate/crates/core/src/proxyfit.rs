//! Proxy-point identification from sweep measurements.
//!
//! Single-channel maximization runs trace paths through channel-value space,
//! each annotated with the gold objective measured by probes. This module
//! fits a polynomial response surface to those `(v₁..v_N, gold)` rows by
//! least squares, masks grid regions where the measurements give the fit no
//! support (Gaussian kernel density below a count-density threshold), and
//! takes the masked grid argmax as the joint proxy point — the channel-value
//! vector beyond which pushing any proxy further stops helping the gold
//! objective.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::f64::consts::PI;
use core::fmt;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::envs::GoodhartSpec;
use crate::linalg;
use crate::trainer::{self, MethodSpec, RunLog, TrainConfig, TrainError};

/// One sweep measurement: per-channel values with the gold objective
/// measured at the same policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub values: Vec<f64>,
    pub gold: f64,
}

/// A set of measurement rows over a fixed channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    num_channels: usize,
    rows: Vec<MeasurementRow>,
}

impl MeasurementSet {
    pub fn new(num_channels: usize) -> Self {
        MeasurementSet { num_channels, rows: Vec::new() }
    }

    pub fn from_rows(num_channels: usize, rows: Vec<MeasurementRow>) -> Result<Self, FitError> {
        let mut set = MeasurementSet::new(num_channels);
        for row in rows {
            set.push(row)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: MeasurementRow) -> Result<(), FitError> {
        if row.values.len() != self.num_channels {
            return Err(FitError::WrongArity {
                expected: self.num_channels,
                got: row.values.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn rows(&self) -> &[MeasurementRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Rectangular evaluation grid: the same node count on every axis, nodes at
/// `min + (max − min)·j/(nodes − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    nodes_per_axis: usize,
}

impl GridSpec {
    pub fn new(mins: Vec<f64>, maxs: Vec<f64>, nodes_per_axis: usize) -> Result<Self, FitError> {
        if mins.len() != maxs.len() || mins.is_empty() {
            return Err(FitError::InvalidSpec(String::from(
                "grid needs matching non-empty min/max vectors",
            )));
        }
        if nodes_per_axis < 2 {
            return Err(FitError::InvalidSpec(String::from("grid needs at least 2 nodes per axis")));
        }
        for (lo, hi) in mins.iter().zip(&maxs) {
            if !(lo < hi) {
                return Err(FitError::InvalidSpec(format!(
                    "grid axis range [{lo}, {hi}] is empty or unordered"
                )));
            }
        }
        let nodes = (nodes_per_axis as u64).checked_pow(mins.len() as u32);
        if !matches!(nodes, Some(total) if total <= 16_000_000) {
            return Err(FitError::InvalidSpec(format!(
                "grid of {nodes_per_axis}^{} nodes is too large",
                mins.len()
            )));
        }
        Ok(GridSpec { mins, maxs, nodes_per_axis })
    }

    /// Grid over `[0, 1]^num_channels` with the given per-axis step
    /// (resolution 0.01 gives 101 nodes per axis).
    pub fn unit(num_channels: usize, resolution: f64) -> Result<Self, FitError> {
        if !(resolution > 0.0 && resolution <= 0.5) {
            return Err(FitError::InvalidSpec(format!(
                "grid resolution {resolution} must lie in (0, 0.5]"
            )));
        }
        let nodes = (1.0 / resolution).round() as usize + 1;
        GridSpec::new(vec![0.0; num_channels], vec![1.0; num_channels], nodes)
    }

    pub fn num_channels(&self) -> usize {
        self.mins.len()
    }

    pub fn mins(&self) -> &[f64] {
        &self.mins
    }

    pub fn maxs(&self) -> &[f64] {
        &self.maxs
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    /// Total node count `nodes_per_axis^num_channels`.
    pub fn num_nodes(&self) -> usize {
        self.nodes_per_axis.pow(self.mins.len() as u32)
    }

    /// Coordinate of node `j` on one axis.
    pub fn axis_coord(&self, axis: usize, j: usize) -> f64 {
        self.mins[axis]
            + (self.maxs[axis] - self.mins[axis]) * j as f64 / (self.nodes_per_axis - 1) as f64
    }

    /// Coordinates of a flat node index. Axis 0 varies slowest, so ascending
    /// flat indices enumerate nodes in lexicographic coordinate order.
    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        let n = self.mins.len();
        let mut coords = vec![0.0; n];
        let mut rest = flat;
        for axis in (0..n).rev() {
            coords[axis] = self.axis_coord(axis, rest % self.nodes_per_axis);
            rest /= self.nodes_per_axis;
        }
        coords
    }
}

/// Failure modes of surface fitting, masking, and argmax.
#[derive(Debug, Clone, PartialEq)]
pub enum FitError {
    /// Fewer rows than polynomial coefficients.
    NotEnoughRows { needed: usize, got: usize },
    /// Collinear design matrix; names the monomials whose columns pivot to
    /// (numerical) zero.
    RankDeficient { monomials: Vec<String> },
    /// Row arity disagrees with the measurement set's channel count.
    WrongArity { expected: usize, got: usize },
    /// The density mask excludes every grid node.
    NoFeasibleRegion,
    /// Malformed grid or degree parameters.
    InvalidSpec(String),
}

impl fmt::Display for FitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitError::NotEnoughRows { needed, got } => write!(
                f,
                "underdetermined fit: {got} measurement rows for {needed} polynomial coefficients"
            ),
            FitError::RankDeficient { monomials } => {
                write!(f, "underdetermined fit: collinear monomial columns [")?;
                for (i, m) in monomials.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    f.write_str(m)?;
                }
                write!(f, "]")
            }
            FitError::WrongArity { expected, got } => {
                write!(f, "measurement row has {got} values, expected {expected}")
            }
            FitError::NoFeasibleRegion => {
                write!(f, "density mask excludes every grid node (no feasible region)")
            }
            FitError::InvalidSpec(msg) => write!(f, "invalid surface spec: {msg}"),
        }
    }
}

impl core::error::Error for FitError {}

/// Exponent tuples of all monomials in `num_channels` variables up to total
/// degree `degree`, in graded lexicographic order: ascending total degree,
/// and within a degree block earlier variables take higher powers first
/// (for two channels, degree 2: `1, v1, v2, v1², v1·v2, v2²`).
pub fn monomial_exponents(num_channels: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut all = Vec::new();
    let mut current = vec![0u32; num_channels];
    for total in 0..=degree as u32 {
        emit_block(&mut all, &mut current, 0, total);
    }
    all
}

fn emit_block(all: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, axis: usize, remaining: u32) {
    if axis == current.len() - 1 {
        current[axis] = remaining;
        all.push(current.clone());
        return;
    }
    for power in (0..=remaining).rev() {
        current[axis] = power;
        emit_block(all, current, axis + 1, remaining - power);
    }
}

/// Human-readable monomial name, e.g. `1`, `v2`, or `v1^2·v2`.
pub fn monomial_name(exponents: &[u32]) -> String {
    let mut name = String::new();
    for (axis, &e) in exponents.iter().enumerate() {
        if e == 0 {
            continue;
        }
        if !name.is_empty() {
            name.push('·');
        }
        name.push_str(&format!("v{}", axis + 1));
        if e > 1 {
            name.push_str(&format!("^{e}"));
        }
    }
    if name.is_empty() {
        name.push('1');
    }
    name
}

/// Number of monomial coefficients for the basis: `C(num_channels + degree,
/// degree)`.
pub fn coefficient_count(num_channels: usize, degree: usize) -> usize {
    // Binomial via the multiplicative formula; desk-scale arguments keep this
    // far from overflow.
    let mut count = 1usize;
    for k in 1..=degree {
        count = count * (num_channels + k) / k;
    }
    count
}

fn evaluate_monomials(exponents: &[Vec<u32>], point: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for exps in exponents {
        let mut term = 1.0;
        for (&v, &e) in point.iter().zip(exps) {
            term *= v.powi(e as i32);
        }
        out.push(term);
    }
}

/// Ordinary least squares of the gold column on the monomial basis. Returns
/// the coefficient vector in `monomial_exponents` order.
pub fn fit_surface(measurements: &MeasurementSet, degree: usize) -> Result<Vec<f64>, FitError> {
    if degree == 0 {
        return Err(FitError::InvalidSpec(String::from("polynomial degree must be at least 1")));
    }
    let n = measurements.num_channels();
    let exponents = monomial_exponents(n, degree);
    let cols = exponents.len();
    let rows = measurements.len();
    if rows < cols {
        return Err(FitError::NotEnoughRows { needed: cols, got: rows });
    }
    let mut design = Vec::with_capacity(rows * cols);
    let mut gold = Vec::with_capacity(rows);
    let mut terms = Vec::with_capacity(cols);
    for row in measurements.rows() {
        evaluate_monomials(&exponents, &row.values, &mut terms);
        design.extend_from_slice(&terms);
        gold.push(row.gold);
    }
    linalg::least_squares(&design, rows, cols, &gold, 1e-10).map_err(|deficiency| {
        FitError::RankDeficient {
            monomials: deficiency
                .columns
                .iter()
                .map(|&c| monomial_name(&exponents[c]))
                .collect(),
        }
    })
}

/// Gaussian-kernel count density at one point:
/// `Σⱼ (2πh²)^{−N/2} exp(−‖x − pⱼ‖² / (2h²))`. Integrates to the row count,
/// so thresholds are in points per unit volume.
pub fn kde_density(measurements: &MeasurementSet, bandwidth: f64, point: &[f64]) -> f64 {
    let n = measurements.num_channels() as f64;
    let h2 = bandwidth * bandwidth;
    let norm = (2.0 * PI * h2).powf(-n / 2.0);
    let mut density = 0.0;
    for row in measurements.rows() {
        let dist2: f64 =
            row.values.iter().zip(point).map(|(&p, &x)| (x - p) * (x - p)).sum();
        density += norm * (-dist2 / (2.0 * h2)).exp();
    }
    density
}

/// Isotropic Scott-style bandwidth: `n^{−1/(N+4)} · σ̄` with `σ̄` the root of
/// the mean per-axis (population) variance. Degenerate inputs — fewer than
/// two rows or zero spread — fall back to a small fixed bandwidth.
pub fn scott_bandwidth(measurements: &MeasurementSet) -> f64 {
    let rows = measurements.len();
    let n = measurements.num_channels();
    if rows < 2 {
        return 1e-3;
    }
    let mut mean = vec![0.0; n];
    for row in measurements.rows() {
        for (m, &v) in mean.iter_mut().zip(&row.values) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut variance = 0.0;
    for row in measurements.rows() {
        for (m, &v) in mean.iter().zip(&row.values) {
            variance += (v - m) * (v - m);
        }
    }
    variance /= (rows * n) as f64;
    if variance <= 0.0 {
        return 1e-3;
    }
    (rows as f64).powf(-1.0 / (n as f64 + 4.0)) * variance.sqrt()
}

/// Support mask over the grid: true where the measurement density reaches
/// the threshold. An empty measurement set has zero density everywhere, so
/// any positive threshold masks out the whole grid; a zero threshold keeps
/// all of it.
pub fn kde_mask(
    measurements: &MeasurementSet,
    bandwidth: f64,
    density_threshold: f64,
    grid: &GridSpec,
) -> Vec<bool> {
    (0..grid.num_nodes())
        .map(|flat| kde_density(measurements, bandwidth, &grid.node_coords(flat)) >= density_threshold)
        .collect()
}

/// A fitted response surface with its evaluation grid and support mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSurface {
    num_channels: usize,
    degree: usize,
    coefficients: Vec<f64>,
    grid: GridSpec,
    bandwidth: f64,
    density_threshold: f64,
    mask: Vec<bool>,
}

impl EvalSurface {
    /// Fits, masks, and bundles in one step. `bandwidth = None` selects the
    /// Scott-style rule from the measurements.
    pub fn build(
        measurements: &MeasurementSet,
        degree: usize,
        grid: GridSpec,
        bandwidth: Option<f64>,
        density_threshold: f64,
    ) -> Result<Self, FitError> {
        if grid.num_channels() != measurements.num_channels() {
            return Err(FitError::InvalidSpec(format!(
                "grid has {} axes for {} channels",
                grid.num_channels(),
                measurements.num_channels()
            )));
        }
        let coefficients = fit_surface(measurements, degree)?;
        let bandwidth = match bandwidth {
            Some(h) if h > 0.0 => h,
            Some(h) => {
                return Err(FitError::InvalidSpec(format!("bandwidth {h} must be positive")))
            }
            None => scott_bandwidth(measurements),
        };
        let mask = kde_mask(measurements, bandwidth, density_threshold, &grid);
        Ok(EvalSurface {
            num_channels: measurements.num_channels(),
            degree,
            coefficients,
            grid,
            bandwidth,
            density_threshold,
            mask,
        })
    }

    /// Reassembles a surface from serialized parts.
    pub fn from_parts(
        num_channels: usize,
        degree: usize,
        coefficients: Vec<f64>,
        grid: GridSpec,
        bandwidth: f64,
        density_threshold: f64,
        mask: Vec<bool>,
    ) -> Result<Self, FitError> {
        let expected = coefficient_count(num_channels, degree);
        if coefficients.len() != expected {
            return Err(FitError::InvalidSpec(format!(
                "{} coefficients for degree {degree} in {num_channels} variables (expected {expected})",
                coefficients.len()
            )));
        }
        if grid.num_channels() != num_channels {
            return Err(FitError::InvalidSpec(format!(
                "grid has {} axes for {num_channels} channels",
                grid.num_channels()
            )));
        }
        if mask.len() != grid.num_nodes() {
            return Err(FitError::InvalidSpec(format!(
                "mask has {} entries for {} grid nodes",
                mask.len(),
                grid.num_nodes()
            )));
        }
        if !(bandwidth > 0.0) {
            return Err(FitError::InvalidSpec(format!("bandwidth {bandwidth} must be positive")));
        }
        Ok(EvalSurface {
            num_channels,
            degree,
            coefficients,
            grid,
            bandwidth,
            density_threshold,
            mask,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density_threshold(&self) -> f64 {
        self.density_threshold
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Polynomial value at a point.
    pub fn evaluate(&self, point: &[f64]) -> f64 {
        let exponents = monomial_exponents(self.num_channels, self.degree);
        let mut terms = Vec::with_capacity(exponents.len());
        evaluate_monomials(&exponents, point, &mut terms);
        self.coefficients.iter().zip(&terms).map(|(c, t)| c * t).sum()
    }

    /// Highest-surface-value node among mask-true nodes, with ties broken
    /// toward lexicographically smallest coordinates. Returns the node's
    /// coordinates and surface value.
    pub fn argmax(&self) -> Result<(Vec<f64>, f64), FitError> {
        let exponents = monomial_exponents(self.num_channels, self.degree);
        let mut terms = Vec::with_capacity(exponents.len());
        let mut best: Option<(Vec<f64>, f64)> = None;
        for flat in 0..self.grid.num_nodes() {
            if !self.mask[flat] {
                continue;
            }
            let coords = self.grid.node_coords(flat);
            evaluate_monomials(&exponents, &coords, &mut terms);
            let value: f64 = self.coefficients.iter().zip(&terms).map(|(c, t)| c * t).sum();
            // Strict improvement keeps the first (lexicographically smallest)
            // node on ties.
            if best.as_ref().is_none_or(|(_, b)| value > *b) {
                best = Some((coords, value));
            }
        }
        best.ok_or(FitError::NoFeasibleRegion)
    }
}

/// Phase 1 of the two-phase pipeline: for each channel, train a plain
/// no-divergence-penalty run that maximizes that channel alone (run seed
/// `base_seed + channel index`), and collect a measurement row from every
/// probe. Returns the pooled rows alongside the per-channel run logs.
pub fn collect_phase1(
    env: &GoodhartSpec,
    config: &TrainConfig,
    base_seed: u64,
) -> Result<(MeasurementSet, Vec<RunLog>), TrainError> {
    let n = env.num_channels();
    let mut measurements = MeasurementSet::new(n);
    let mut logs = Vec::with_capacity(n);
    for channel in 0..n {
        let mut weights = vec![0.0; n];
        weights[channel] = 1.0;
        let method = MethodSpec::ppo_no_kl(weights);
        let log = trainer::train_run(env, &method, config, base_seed + channel as u64)?;
        for record in &log.records {
            if let (Some(values), Some(gold)) = (&record.probe_values, record.gold) {
                measurements
                    .push(MeasurementRow { values: values.clone(), gold })
                    .expect("probe arity matches the environment");
            }
        }
        logs.push(log);
    }
    Ok((measurements, logs))
}
