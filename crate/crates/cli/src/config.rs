//! Experiment configuration: the TOML schema, its defaults, and resolution
//! into the core crate's types.
//!
//! Every key defaults to the calibrated two-channel sequence regime, so an
//! empty file — or no file at all — runs the standard setup and a config
//! only needs the keys it changes. Unknown and duplicated keys are rejected
//! with the offending name; validation failures name the section and key
//! they concern.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use proxylab_core::envs::GoodhartSpec;
use proxylab_core::lagrange::MultiplierGradForm;
use proxylab_core::neldermead::NmConfig;
use proxylab_core::trainer::{MethodSpec, TrainConfig};

use crate::error::CliError;

/// What a run executes. Selected by `[run].phase` for the `run` subcommand;
/// the dedicated subcommands each force their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Phase1,
    TwoPhase,
    NmSearch,
    Sweep,
}

impl Phase {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "train" => Ok(Phase::Train),
            "phase1" => Ok(Phase::Phase1),
            "two_phase" => Ok(Phase::TwoPhase),
            "nm_search" => Ok(Phase::NmSearch),
            "sweep" => Ok(Phase::Sweep),
            other => Err(CliError::Config(format!(
                "[run].phase: unknown phase '{other}' (expected train, phase1, two_phase, \
                 nm_search, or sweep)"
            ))),
        }
    }
}

/// Which constrained method pins the fitted proxy point in phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoPhaseMethod {
    /// Equality-pinned channels (`v = θ`).
    Xi,
    /// Lower-bounded channels (`v ≥ θ`).
    Mu,
}

impl TwoPhaseMethod {
    pub fn spec(self, thresholds: Vec<f64>) -> MethodSpec {
        match self {
            TwoPhaseMethod::Xi => MethodSpec::xi_ppo(thresholds),
            TwoPhaseMethod::Mu => MethodSpec::mu_ppo(thresholds),
        }
    }
}

/// Response-surface fit controls for phase 1.
#[derive(Debug, Clone)]
pub struct SurfaceParams {
    pub degree: usize,
    pub grid_resolution: f64,
    /// `None` selects the Scott-style bandwidth rule from the measurements.
    pub bandwidth: Option<f64>,
    pub density_threshold: f64,
}

/// A fully resolved experiment: core types plus the harness-level knobs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub env: GoodhartSpec,
    pub method: MethodSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub phase: Phase,
    pub surface: SurfaceParams,
    /// Template for threshold searches; `seed` is replaced per run seed.
    pub nm: NmConfig,
    pub two_phase: TwoPhaseMethod,
    pub weightings: Vec<Vec<f64>>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub probe_every: Option<usize>,
    pub steps: Option<usize>,
}

// ---------------------------------------------------------------------------
// TOML schema. Every field is optional; `deny_unknown_fields` turns typos
// into named diagnostics instead of silently ignored keys.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    env: Option<EnvSection>,
    method: Option<MethodSection>,
    train: Option<TrainSection>,
    run: Option<RunSection>,
    surface: Option<SurfaceSection>,
    nm: Option<NmSection>,
    two_phase: Option<TwoPhaseSection>,
    sweep: Option<SweepSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvSection {
    channels: Option<usize>,
    peak: Option<Vec<f64>>,
    weights: Option<Vec<f64>>,
    cross: Option<Vec<Vec<f64>>>,
    /// Episode length; `T` is accepted as a synonym.
    #[serde(alias = "T")]
    horizon: Option<usize>,
    vocab: Option<usize>,
    tokens: Option<Vec<Vec<u32>>>,
    reference_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodSection {
    kind: Option<String>,
    weights: Option<Vec<f64>>,
    thresholds: Option<Vec<f64>>,
    kl_coef: Option<f64>,
    /// Divergence target for the adaptive coefficient controller; 0 holds
    /// the coefficient fixed.
    kl_target: Option<f64>,
    kl_lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    steps_per_update: Option<usize>,
    total_steps: Option<usize>,
    batch_size: Option<usize>,
    epochs_per_update: Option<usize>,
    learning_rate: Option<f64>,
    discount: Option<f64>,
    gae_lambda: Option<f64>,
    clip_ratio: Option<f64>,
    value_coefficients: Option<Vec<f64>>,
    multiplier_lr: Option<f64>,
    multiplier_momentum: Option<f64>,
    multiplier_grad_form: Option<String>,
    policy_init_scale: Option<f64>,
    top_k: Option<usize>,
    probe_every: Option<usize>,
    probe_episodes: Option<usize>,
    probe_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    phase: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurfaceSection {
    degree: Option<usize>,
    grid_resolution: Option<f64>,
    kde_bandwidth: Option<f64>,
    density_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NmSection {
    total_budget: Option<usize>,
    perturb_scale: Option<f64>,
    converge_tol: Option<f64>,
    diameter_tol: Option<f64>,
    cache_rel_tol: Option<f64>,
    reflection: Option<f64>,
    expansion: Option<f64>,
    contraction: Option<f64>,
    shrink: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TwoPhaseSection {
    method: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    weightings: Option<Vec<Vec<f64>>>,
}

// ---------------------------------------------------------------------------
// Loading and resolution.

/// Reads and parses the config file; no file means all defaults.
pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
}

/// Resolves the file plus overrides into a runnable experiment. `forced`
/// carries the subcommand's phase; `None` (the `run` subcommand) defers to
/// `[run].phase`.
pub fn resolve(
    file: FileConfig,
    forced: Option<Phase>,
    overrides: &Overrides,
) -> Result<Experiment, CliError> {
    let run = file.run.unwrap_or_default();
    let phase = match forced {
        Some(p) => p,
        None => Phase::parse(run.phase.as_deref().unwrap_or("train"))?,
    };

    let env = resolve_env(file.env)?;
    let method = resolve_method(file.method, &env, phase)?;
    let train = resolve_train(file.train, overrides)?;
    let surface = resolve_surface(file.surface)?;
    let nm = resolve_nm(file.nm, &train)?;
    let two_phase = resolve_two_phase(file.two_phase)?;
    let weightings = resolve_sweep(file.sweep, env.num_channels(), phase)?;

    let seeds = match overrides.seed {
        Some(s) => vec![s],
        None => run.seeds.unwrap_or_else(|| vec![1, 2, 3]),
    };
    if seeds.is_empty() {
        return Err(CliError::Config("[run].seeds: must not be empty".into()));
    }
    let out = overrides
        .out
        .clone()
        .or(run.out)
        .unwrap_or_else(|| PathBuf::from("artifacts"));

    Ok(Experiment { env, method, train, seeds, out, phase, surface, nm, two_phase, weightings })
}

fn resolve_env(section: Option<EnvSection>) -> Result<GoodhartSpec, CliError> {
    let s = section.unwrap_or_default();
    let channels = s.channels.unwrap_or(2);
    if channels == 0 {
        return Err(CliError::Config("[env].channels: must be at least 1".into()));
    }
    // The two-channel defaults reproduce the standard sequence task; other
    // widths have no canonical geometry and must spell theirs out.
    let peak = match s.peak {
        Some(p) => p,
        None if channels == 2 => vec![0.23, 0.48],
        None => {
            return Err(CliError::Config(format!(
                "[env].peak: required when channels = {channels}"
            )))
        }
    };
    let weights = match s.weights {
        Some(w) => w,
        None if channels == 2 => vec![4.0, 4.0],
        None => {
            return Err(CliError::Config(format!(
                "[env].weights: required when channels = {channels}"
            )))
        }
    };
    if peak.len() != channels {
        return Err(CliError::Config(format!(
            "[env].peak: {} entries for {channels} channels",
            peak.len()
        )));
    }
    if weights.len() != channels {
        return Err(CliError::Config(format!(
            "[env].weights: {} entries for {channels} channels",
            weights.len()
        )));
    }
    let cross = s.cross.unwrap_or_else(|| vec![vec![0.0; channels]; channels]);
    let horizon = s.horizon.unwrap_or(20);
    let vocab = s.vocab.unwrap_or(32);
    let reference_seed = s.reference_seed.unwrap_or(17);

    let spec = GoodhartSpec::new(peak, weights, cross, horizon, vocab, reference_seed)
        .map_err(|e| CliError::Config(format!("[env]: {e}")))?;

    match s.tokens {
        Some(tokens) => spec
            .with_channel_tokens(tokens)
            .map_err(|e| CliError::Config(format!("[env].tokens: {e}"))),
        // The standard two-channel task nests the second channel's token set
        // over the first's, which needs 9 tokens; narrower vocabularies fall
        // back to the constructor's disjoint blocks.
        None if channels == 2 && vocab >= 9 => spec
            .with_channel_tokens(vec![vec![0, 1, 2, 3], vec![0, 1, 2, 3, 4, 5, 6, 7, 8]])
            .map_err(|e| CliError::Config(format!("[env]: {e}"))),
        None => Ok(spec),
    }
}

fn resolve_method(
    section: Option<MethodSection>,
    env: &GoodhartSpec,
    phase: Phase,
) -> Result<MethodSpec, CliError> {
    let s = section.unwrap_or_default();
    let n = env.num_channels();
    let kind = s.kind.as_deref().unwrap_or("ppo");

    // Reject keys the chosen method would silently drop.
    let uses_weights = matches!(kind, "ppo_no_kl" | "ppo" | "ppo_sat" | "all_ppo");
    let uses_thresholds = matches!(kind, "ppo_sat" | "mu_ppo" | "all_ppo" | "xi_ppo");
    let uses_kl = matches!(kind, "ppo" | "ppo_sat" | "all_ppo");
    if !uses_weights && s.weights.is_some() {
        return Err(CliError::Config(format!("[method].weights: not used by {kind}")));
    }
    if !uses_thresholds && s.thresholds.is_some() {
        return Err(CliError::Config(format!("[method].thresholds: not used by {kind}")));
    }
    if !uses_kl && (s.kl_coef.is_some() || s.kl_target.is_some() || s.kl_lr.is_some()) {
        return Err(CliError::Config(format!(
            "[method].kl_coef/kl_target/kl_lr: not used by {kind}"
        )));
    }

    let weights = s.weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
    let thresholds = match s.thresholds {
        Some(t) => t,
        // Only a direct training run consumes the method as written: sweeps
        // replace the weights per run, and the other phases build their own
        // methods (one-hot measurement runs, fitted or searched thresholds).
        None if uses_thresholds && phase == Phase::Train => {
            return Err(CliError::Config(format!(
                "[method].thresholds: required for {kind}"
            )))
        }
        None => Vec::new(),
    };
    let kl_coef = s.kl_coef.unwrap_or(0.2);
    let kl_target = match s.kl_target.unwrap_or(0.5) {
        t if t == 0.0 => None,
        t if t > 0.0 => Some(t),
        t => {
            return Err(CliError::Config(format!(
                "[method].kl_target: {t} must be positive (0 disables the controller)"
            )))
        }
    };
    let kl_lr = s.kl_lr.unwrap_or(0.1);

    let method = match kind {
        "ppo_no_kl" => MethodSpec::ppo_no_kl(weights),
        "ppo" => MethodSpec::ppo(weights, kl_coef, kl_target, kl_lr),
        "ppo_sat" => MethodSpec::ppo_sat(weights, thresholds, kl_coef, kl_target, kl_lr),
        "mu_ppo" => MethodSpec::mu_ppo(thresholds),
        "all_ppo" => MethodSpec::all_ppo(weights, thresholds, kl_coef, kl_target, kl_lr),
        "xi_ppo" => MethodSpec::xi_ppo(thresholds),
        other => {
            return Err(CliError::Config(format!(
                "[method].kind: unknown method '{other}' (expected ppo_no_kl, ppo, ppo_sat, \
                 mu_ppo, all_ppo, or xi_ppo)"
            )))
        }
    };
    // Arity and range checks live in the core; only the train phase holds a
    // complete method at this point.
    if phase == Phase::Train {
        method.validate(n).map_err(|e| CliError::Config(format!("[method]: {e}")))?;
    }
    Ok(method)
}

fn resolve_train(
    section: Option<TrainSection>,
    overrides: &Overrides,
) -> Result<TrainConfig, CliError> {
    let s = section.unwrap_or_default();
    let d = TrainConfig::default();
    let grad_form = match s.multiplier_grad_form.as_deref() {
        None | Some("chain_rule") => MultiplierGradForm::ChainRule,
        Some("squash_value") => MultiplierGradForm::SquashValue,
        Some(other) => {
            return Err(CliError::Config(format!(
                "[train].multiplier_grad_form: unknown form '{other}' (expected chain_rule or \
                 squash_value)"
            )))
        }
    };
    if s.top_k == Some(0) {
        return Err(CliError::Config(
            "[train].top_k: must be at least 1 when present (omit for the full vocabulary)".into(),
        ));
    }
    Ok(TrainConfig {
        steps_per_update: s.steps_per_update.unwrap_or(d.steps_per_update),
        total_steps: overrides.steps.or(s.total_steps).unwrap_or(d.total_steps),
        batch_size: s.batch_size.unwrap_or(d.batch_size),
        epochs_per_update: s.epochs_per_update.unwrap_or(d.epochs_per_update),
        learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
        discount: s.discount.unwrap_or(d.discount),
        gae_lambda: s.gae_lambda.unwrap_or(d.gae_lambda),
        clip_ratio: s.clip_ratio.unwrap_or(d.clip_ratio),
        value_coefficients: s.value_coefficients.unwrap_or_default(),
        multiplier_lr: s.multiplier_lr.map(Some).unwrap_or(d.multiplier_lr),
        multiplier_momentum: s.multiplier_momentum.unwrap_or(d.multiplier_momentum),
        multiplier_grad_form: grad_form,
        policy_init_scale: s.policy_init_scale.unwrap_or(d.policy_init_scale),
        top_k: s.top_k,
        probe_every: overrides.probe_every.or(s.probe_every).unwrap_or(d.probe_every),
        probe_episodes: s.probe_episodes.unwrap_or(d.probe_episodes),
        probe_seed: s.probe_seed.unwrap_or(d.probe_seed),
    })
}

fn resolve_surface(section: Option<SurfaceSection>) -> Result<SurfaceParams, CliError> {
    let s = section.unwrap_or_default();
    if let Some(h) = s.kde_bandwidth {
        if h <= 0.0 {
            return Err(CliError::Config(format!(
                "[surface].kde_bandwidth: {h} must be positive (omit for the data-driven rule)"
            )));
        }
    }
    Ok(SurfaceParams {
        degree: s.degree.unwrap_or(4),
        grid_resolution: s.grid_resolution.unwrap_or(0.01),
        bandwidth: s.kde_bandwidth,
        // Calibrated for the default probe cadence (66 rows from two runs);
        // scale it with probe count if the cadence changes.
        density_threshold: s.density_threshold.unwrap_or(50.0),
    })
}

fn resolve_nm(section: Option<NmSection>, train: &TrainConfig) -> Result<NmConfig, CliError> {
    let s = section.unwrap_or_default();
    let mut nm = NmConfig::default();
    // The default budget tracks the configured run length: twice one full
    // training run, matching the two-phase pipeline it competes with.
    nm.total_budget = s.total_budget.unwrap_or(2 * train.total_steps);
    if let Some(v) = s.perturb_scale {
        nm.perturb_scale = v;
    }
    if let Some(v) = s.converge_tol {
        nm.converge_tol = v;
    }
    if let Some(v) = s.diameter_tol {
        nm.diameter_tol = v;
    }
    if let Some(v) = s.cache_rel_tol {
        nm.cache_rel_tol = v;
    }
    if let Some(v) = s.reflection {
        nm.coefficients.reflection = v;
    }
    if let Some(v) = s.expansion {
        nm.coefficients.expansion = v;
    }
    if let Some(v) = s.contraction {
        nm.coefficients.contraction = v;
    }
    if let Some(v) = s.shrink {
        nm.coefficients.shrink = v;
    }
    if nm.total_budget == 0 {
        return Err(CliError::Config("[nm].total_budget: must be positive".into()));
    }
    Ok(nm)
}

fn resolve_two_phase(section: Option<TwoPhaseSection>) -> Result<TwoPhaseMethod, CliError> {
    let s = section.unwrap_or_default();
    match s.method.as_deref().unwrap_or("xi_ppo") {
        "xi_ppo" => Ok(TwoPhaseMethod::Xi),
        "mu_ppo" => Ok(TwoPhaseMethod::Mu),
        other => Err(CliError::Config(format!(
            "[two_phase].method: phase 2 holds thresholds, so it needs xi_ppo or mu_ppo, \
             got '{other}'"
        ))),
    }
}

fn resolve_sweep(
    section: Option<SweepSection>,
    channels: usize,
    phase: Phase,
) -> Result<Vec<Vec<f64>>, CliError> {
    let s = section.unwrap_or_default();
    let weightings = match s.weightings {
        Some(w) => w,
        None if channels == 2 => vec![
            vec![1.0, 0.0],
            vec![0.75, 0.25],
            vec![0.5, 0.5],
            vec![0.25, 0.75],
            vec![0.0, 1.0],
        ],
        None if phase == Phase::Sweep => {
            return Err(CliError::Config(format!(
                "[sweep].weightings: required when channels = {channels}"
            )))
        }
        None => Vec::new(),
    };
    if phase == Phase::Sweep && weightings.is_empty() {
        return Err(CliError::Config("[sweep].weightings: must not be empty".into()));
    }
    for (j, w) in weightings.iter().enumerate() {
        if w.len() != channels {
            return Err(CliError::Config(format!(
                "[sweep].weightings[{j}]: {} entries for {channels} channels",
                w.len()
            )));
        }
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(CliError::Config(format!(
                "[sweep].weightings[{j}]: entries must be finite and non-negative"
            )));
        }
    }
    Ok(weightings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_str(text: &str, forced: Option<Phase>) -> Result<Experiment, CliError> {
        let file: FileConfig = toml::from_str(text).expect("test configs parse");
        resolve(file, forced, &Overrides::default())
    }

    #[test]
    fn empty_config_reproduces_the_standard_regime() {
        let exp = resolve_str("", None).unwrap();
        assert_eq!(exp.env, GoodhartSpec::default_sequence(17));
        assert_eq!(exp.train, TrainConfig::default());
        assert_eq!(exp.seeds, vec![1, 2, 3]);
        assert_eq!(exp.phase, Phase::Train);
        assert_eq!(exp.nm.total_budget, 2 * exp.train.total_steps);
    }

    #[test]
    fn horizon_accepts_its_single_letter_synonym() {
        let exp = resolve_str("[env]\nT = 7\n", None).unwrap();
        assert_eq!(exp.env.horizon(), 7);
    }

    #[test]
    fn zero_kl_target_disables_the_controller() {
        let exp = resolve_str("[method]\nkind = \"ppo\"\nkl_target = 0.0\n", None).unwrap();
        assert_eq!(exp.method.kl_target(), None);
    }

    #[test]
    fn unknown_phase_names_the_field() {
        let err = resolve_str("[run]\nphase = \"both\"\n", None).unwrap_err();
        assert!(err.to_string().contains("[run].phase"), "{err}");
    }

    #[test]
    fn constrained_kind_without_thresholds_is_rejected() {
        let err = resolve_str("[method]\nkind = \"xi_ppo\"\n", None).unwrap_err();
        assert!(err.to_string().contains("[method].thresholds"), "{err}");
    }

    #[test]
    fn threshold_methods_need_no_thresholds_when_searched_or_fitted() {
        let exp = resolve_str("[method]\nkind = \"xi_ppo\"\n", Some(Phase::TwoPhase)).unwrap();
        assert!(exp.method.thresholds().is_empty());
    }

    #[test]
    fn keys_a_method_ignores_are_rejected() {
        let err = resolve_str(
            "[method]\nkind = \"xi_ppo\"\nthresholds = [0.2, 0.4]\nweights = [1.0, 0.0]\n",
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("[method].weights"), "{err}");
    }

    #[test]
    fn seed_override_collapses_the_list() {
        let file: FileConfig = toml::from_str("[run]\nseeds = [4, 5, 6]\n").unwrap();
        let overrides = Overrides { seed: Some(9), ..Overrides::default() };
        let exp = resolve(file, None, &overrides).unwrap();
        assert_eq!(exp.seeds, vec![9]);
    }

    #[test]
    fn wider_envs_require_explicit_geometry() {
        let err = resolve_str("[env]\nchannels = 3\n", None).unwrap_err();
        assert!(err.to_string().contains("[env].peak"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = toml::from_str::<FileConfig>("[train]\nlearning_rte = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
    }
}
