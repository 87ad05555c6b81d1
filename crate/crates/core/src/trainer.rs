//! The policy-optimization loop: clipped-surrogate updates with per-channel
//! value heads, parameterized by method — plain composite-reward training
//! (with or without an adaptive KL penalty), saturating reward shaping, and
//! the three constrained variants whose Lagrange multipliers reweight the
//! advantage mixture.
//!
//! One update round samples a fixed number of environment steps, computes
//! per-head advantages and frozen-bootstrap value targets, runs several
//! epochs of seeded-shuffle minibatch SGD on policy and heads, and then —
//! once per round, so the logged trajectory replays exactly — steps the
//! multipliers from the round's measured channel values and the adaptive KL
//! coefficient from the round's sampled divergence.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::advantage;
use crate::envs::{EnvError, EnvState, GoodhartSpec};
use crate::lagrange::{ConstraintMode, LagrangeState, MultiplierGradForm};
use crate::policy::{ReferencePolicy, SoftmaxPolicy, ValueHeads};

/// The six training methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    /// Fixed-weight composite channel reward, no divergence penalty.
    PpoNoKl,
    /// Fixed-weight composite channel reward plus a KL penalty.
    Ppo,
    /// Saturating reward: negative squared deviation from per-channel
    /// targets, plus a KL penalty.
    PpoSat,
    /// Constrained: KL reward as task, channels held *at or above* thresholds
    /// by sigmoid-squashed multipliers.
    MuPpo,
    /// Composite channel reward plus KL penalty as task, channels *capped at*
    /// thresholds by sigmoid-squashed multipliers with downward pressure.
    AllPpo,
    /// Constrained: KL reward as task, channels *pinned to* thresholds by
    /// tanh-squashed multipliers.
    XiPpo,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::PpoNoKl => "ppo_no_kl",
            MethodKind::Ppo => "ppo",
            MethodKind::PpoSat => "ppo_sat",
            MethodKind::MuPpo => "mu_ppo",
            MethodKind::AllPpo => "all_ppo",
            MethodKind::XiPpo => "xi_ppo",
        }
    }

    /// Whether the method maintains Lagrange multipliers.
    pub fn is_constrained(self) -> bool {
        matches!(self, MethodKind::MuPpo | MethodKind::AllPpo | MethodKind::XiPpo)
    }

    /// Whether the task reward includes a coefficient-scaled KL penalty term
    /// (as opposed to the KL reward *being* the task, or no penalty at all).
    fn carries_kl_penalty(self) -> bool {
        matches!(self, MethodKind::Ppo | MethodKind::PpoSat | MethodKind::AllPpo)
    }

    fn constraint_mode(self) -> Option<ConstraintMode> {
        match self {
            MethodKind::MuPpo => Some(ConstraintMode::InequalityGe),
            MethodKind::AllPpo => Some(ConstraintMode::InequalityLe),
            MethodKind::XiPpo => Some(ConstraintMode::Equality),
            _ => None,
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for MethodKind {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, UnknownMethod> {
        Ok(match s {
            "ppo_no_kl" => MethodKind::PpoNoKl,
            "ppo" => MethodKind::Ppo,
            "ppo_sat" => MethodKind::PpoSat,
            "mu_ppo" => MethodKind::MuPpo,
            "all_ppo" => MethodKind::AllPpo,
            "xi_ppo" => MethodKind::XiPpo,
            _ => return Err(UnknownMethod(String::from(s))),
        })
    }
}

/// Unrecognized method name in configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownMethod(pub String);

impl fmt::Display for UnknownMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown method '{}' (expected ppo_no_kl, ppo, ppo_sat, mu_ppo, all_ppo, or xi_ppo)",
            self.0
        )
    }
}

impl core::error::Error for UnknownMethod {}

/// A method together with its per-channel parameters. Built through the
/// per-kind constructors so only the fields the method actually uses can be
/// populated.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    kind: MethodKind,
    channel_weights: Vec<f64>,
    thresholds: Vec<f64>,
    kl_coef_init: f64,
    kl_target: Option<f64>,
    kl_lr: f64,
}

impl MethodSpec {
    /// Composite reward `Σᵢ αᵢ rᵢ` with no divergence penalty.
    pub fn ppo_no_kl(channel_weights: Vec<f64>) -> Self {
        MethodSpec {
            kind: MethodKind::PpoNoKl,
            channel_weights,
            thresholds: Vec::new(),
            kl_coef_init: 0.0,
            kl_target: None,
            kl_lr: 0.0,
        }
    }

    /// Composite reward plus `α_KL`-scaled KL penalty. With `kl_target` set,
    /// the coefficient adapts toward that divergence each round; with `None`
    /// it stays fixed at `kl_coef_init`.
    pub fn ppo(
        channel_weights: Vec<f64>,
        kl_coef_init: f64,
        kl_target: Option<f64>,
        kl_lr: f64,
    ) -> Self {
        MethodSpec {
            kind: MethodKind::Ppo,
            channel_weights,
            thresholds: Vec::new(),
            kl_coef_init,
            kl_target,
            kl_lr,
        }
    }

    /// Saturating reward `−Σᵢ αᵢ (rᵢ − θᵢ)²` plus KL penalty: deviation from
    /// the per-channel targets is punished in both directions.
    pub fn ppo_sat(
        channel_weights: Vec<f64>,
        targets: Vec<f64>,
        kl_coef_init: f64,
        kl_target: Option<f64>,
        kl_lr: f64,
    ) -> Self {
        MethodSpec {
            kind: MethodKind::PpoSat,
            channel_weights,
            thresholds: targets,
            kl_coef_init,
            kl_target,
            kl_lr,
        }
    }

    /// Constrained: maximize the KL reward subject to `vᵢ ≥ θᵢ`.
    pub fn mu_ppo(thresholds: Vec<f64>) -> Self {
        MethodSpec {
            kind: MethodKind::MuPpo,
            channel_weights: Vec::new(),
            thresholds,
            kl_coef_init: 0.0,
            kl_target: None,
            kl_lr: 0.0,
        }
    }

    /// Constrained: maximize the composite-plus-KL-penalty reward subject to
    /// `vᵢ ≤ θᵢ` (caps that hold every channel back from overshooting).
    pub fn all_ppo(
        channel_weights: Vec<f64>,
        caps: Vec<f64>,
        kl_coef_init: f64,
        kl_target: Option<f64>,
        kl_lr: f64,
    ) -> Self {
        MethodSpec {
            kind: MethodKind::AllPpo,
            channel_weights,
            thresholds: caps,
            kl_coef_init,
            kl_target,
            kl_lr,
        }
    }

    /// Constrained: maximize the KL reward subject to `vᵢ = θᵢ`.
    pub fn xi_ppo(thresholds: Vec<f64>) -> Self {
        MethodSpec {
            kind: MethodKind::XiPpo,
            channel_weights: Vec::new(),
            thresholds,
            kl_coef_init: 0.0,
            kl_target: None,
            kl_lr: 0.0,
        }
    }

    pub fn kind(&self) -> MethodKind {
        self.kind
    }

    pub fn channel_weights(&self) -> &[f64] {
        &self.channel_weights
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn kl_coef_init(&self) -> f64 {
        self.kl_coef_init
    }

    pub fn kl_target(&self) -> Option<f64> {
        self.kl_target
    }

    pub fn kl_lr(&self) -> f64 {
        self.kl_lr
    }

    /// Checks the per-channel parameter lengths and KL-controller parameters
    /// against an environment with `num_channels` channels.
    pub fn validate(&self, num_channels: usize) -> Result<(), TrainError> {
        let uses_weights = matches!(
            self.kind,
            MethodKind::PpoNoKl | MethodKind::Ppo | MethodKind::PpoSat | MethodKind::AllPpo
        );
        let uses_thresholds = matches!(
            self.kind,
            MethodKind::PpoSat | MethodKind::MuPpo | MethodKind::AllPpo | MethodKind::XiPpo
        );
        if uses_weights && self.channel_weights.len() != num_channels {
            return Err(TrainError::InvalidMethod(format!(
                "{} needs {} channel weights, got {}",
                self.kind,
                num_channels,
                self.channel_weights.len()
            )));
        }
        if uses_thresholds {
            if self.thresholds.len() != num_channels {
                return Err(TrainError::InvalidMethod(format!(
                    "{} needs {} thresholds, got {}",
                    self.kind,
                    num_channels,
                    self.thresholds.len()
                )));
            }
            for (i, &t) in self.thresholds.iter().enumerate() {
                if !(0.0..=1.0).contains(&t) {
                    return Err(TrainError::InvalidMethod(format!(
                        "threshold {} for channel {} outside [0, 1]",
                        t,
                        i + 1
                    )));
                }
            }
        }
        if self.kind.carries_kl_penalty() {
            if !self.kl_coef_init.is_finite() || self.kl_coef_init < 0.0 {
                return Err(TrainError::InvalidMethod(format!(
                    "KL coefficient {} must be finite and non-negative",
                    self.kl_coef_init
                )));
            }
            if let Some(target) = self.kl_target {
                if !(target > 0.0) {
                    return Err(TrainError::InvalidMethod(format!(
                        "KL target {target} must be positive"
                    )));
                }
                if !(self.kl_lr >= 0.0) {
                    return Err(TrainError::InvalidMethod(format!(
                        "KL controller rate {} must be non-negative",
                        self.kl_lr
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Optimization hyperparameters shared by every method.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Environment steps sampled per update round (must be a whole number of
    /// episodes).
    pub steps_per_update: usize,
    /// Total environment steps for a full run; the round count is
    /// `ceil(total_steps / steps_per_update)`.
    pub total_steps: usize,
    /// Steps per minibatch. The last minibatch of an epoch may be smaller.
    pub batch_size: usize,
    /// Passes over the round's buffer per update round.
    pub epochs_per_update: usize,
    /// SGD step size for policy and value heads.
    pub learning_rate: f64,
    /// Discount γ.
    pub discount: f64,
    /// GAE decay λ.
    pub gae_lambda: f64,
    /// Surrogate clip radius ε.
    pub clip_ratio: f64,
    /// Per-head loss coefficients `[task, channel 1, …]`. Empty selects the
    /// per-method default: 0.2 on the task (KL) head for the KL-as-task
    /// constrained methods, 0.5 everywhere else.
    pub value_coefficients: Vec<f64>,
    /// Multiplier step size; `None` falls back to `10 × learning_rate`.
    /// The shipped default pins 0.5 — at this scale the fallback ratio winds
    /// the multipliers into squash saturation faster than the policy can
    /// track them.
    pub multiplier_lr: Option<f64>,
    /// Multiplier SGD momentum.
    pub multiplier_momentum: f64,
    /// Violation scaling form for the multiplier step.
    pub multiplier_grad_form: MultiplierGradForm,
    /// Half-width of the uniform policy weight initialization.
    pub policy_init_scale: f64,
    /// Top-k action truncation (`None` = full vocabulary).
    pub top_k: Option<usize>,
    /// Probe the gold objective every this many rounds (first and last rounds
    /// always probe).
    pub probe_every: usize,
    /// Episodes per gold probe.
    pub probe_episodes: usize,
    /// Seed for the probe's private random stream, fixed across rounds so
    /// probe noise is common to every measurement.
    pub probe_seed: u64,
}

impl Default for TrainConfig {
    /// Defaults calibrated on the default sequence environment: 160 rounds
    /// of 640 steps converge the constrained methods to their thresholds
    /// (multiplier dual ascent needs update count more than per-update
    /// sample size), and the unconstrained proxy run rises past the gold
    /// peak and collapses well inside the step budget.
    fn default() -> Self {
        TrainConfig {
            steps_per_update: 640,
            total_steps: 102_400,
            batch_size: 64,
            epochs_per_update: 5,
            learning_rate: 0.3,
            discount: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            value_coefficients: Vec::new(),
            multiplier_lr: Some(0.5),
            multiplier_momentum: 0.1,
            multiplier_grad_form: MultiplierGradForm::ChainRule,
            policy_init_scale: 0.01,
            top_k: None,
            probe_every: 5,
            probe_episodes: 64,
            probe_seed: 0x9e3779b97f4a7c15,
        }
    }
}

impl TrainConfig {
    /// Number of update rounds a full run executes.
    pub fn num_rounds(&self) -> usize {
        self.total_steps.div_ceil(self.steps_per_update)
    }

    fn validate(&self, env: &GoodhartSpec) -> Result<(), TrainError> {
        let horizon = env.horizon();
        if self.steps_per_update == 0 || self.steps_per_update % horizon != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "steps_per_update {} must be a positive multiple of the horizon {}",
                self.steps_per_update, horizon
            )));
        }
        if self.total_steps == 0 {
            return Err(TrainError::InvalidConfig(String::from("total_steps must be positive")));
        }
        if self.batch_size == 0 || self.batch_size > self.steps_per_update {
            return Err(TrainError::InvalidConfig(format!(
                "batch_size {} must be in 1..={}",
                self.batch_size, self.steps_per_update
            )));
        }
        if self.epochs_per_update == 0 {
            return Err(TrainError::InvalidConfig(String::from(
                "epochs_per_update must be positive",
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "discount {} must lie in (0, 1]",
                self.discount
            )));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(TrainError::InvalidConfig(format!(
                "gae_lambda {} must lie in [0, 1]",
                self.gae_lambda
            )));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "clip_ratio {} must lie in (0, 1)",
                self.clip_ratio
            )));
        }
        if !self.value_coefficients.is_empty()
            && self.value_coefficients.len() != env.num_channels() + 1
        {
            return Err(TrainError::InvalidConfig(format!(
                "value_coefficients needs {} entries (task plus one per channel), got {}",
                env.num_channels() + 1,
                self.value_coefficients.len()
            )));
        }
        if let Some(lr) = self.multiplier_lr {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(TrainError::InvalidConfig(format!(
                    "multiplier_lr {lr} must be positive and finite"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.multiplier_momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "multiplier_momentum {} must lie in [0, 1)",
                self.multiplier_momentum
            )));
        }
        if !(self.policy_init_scale >= 0.0) || !self.policy_init_scale.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "policy_init_scale {} must be non-negative and finite",
                self.policy_init_scale
            )));
        }
        if self.probe_every == 0 {
            return Err(TrainError::InvalidConfig(String::from("probe_every must be positive")));
        }
        if self.probe_episodes == 0 {
            return Err(TrainError::InvalidConfig(String::from(
                "probe_episodes must be positive",
            )));
        }
        Ok(())
    }

    /// Per-head value-loss coefficients after applying the method default.
    pub fn head_coefficients(&self, method: &MethodSpec, num_channels: usize) -> Vec<f64> {
        if !self.value_coefficients.is_empty() {
            return self.value_coefficients.clone();
        }
        let mut coefs = vec![0.5; num_channels + 1];
        if matches!(method.kind(), MethodKind::MuPpo | MethodKind::XiPpo) {
            coefs[0] = 0.2;
        }
        coefs
    }
}

/// Configuration or numerical failure of a training run.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    /// Method parameters inconsistent with the environment.
    InvalidMethod(String),
    /// Optimization hyperparameters out of range.
    InvalidConfig(String),
    /// A loss became non-finite; the message names the round.
    NumericalAbort(String),
    /// Environment failure during rollout.
    Env(EnvError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidMethod(msg) => write!(f, "invalid method: {msg}"),
            TrainError::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::NumericalAbort(msg) => write!(f, "numerical abort: {msg}"),
            TrainError::Env(e) => write!(f, "environment error: {e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<EnvError> for TrainError {
    fn from(e: EnvError) -> Self {
        TrainError::Env(e)
    }
}

/// One update round's log entry.
///
/// Measurement fields (`values`, `kl_value`, `violations`, losses) describe
/// the round itself; state fields (`multiplier_raw`, `multiplier_weights`,
/// `kl_coef`) and the probe show the state *after* the round's updates — so
/// consecutive records replay the multiplier recursion exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// 1-based round number.
    pub update_index: usize,
    /// Cumulative environment steps after this round.
    pub env_steps: usize,
    /// Measured per-channel values: round means of discount-normalized
    /// rewards-to-go, on the same [0, 1] scale as thresholds.
    pub values: Vec<f64>,
    /// Sampled divergence estimate: round mean of `log π(a|s) − log π₀(a|s)`.
    pub kl_value: f64,
    /// Gold objective from the probe, on probe rounds.
    pub gold: Option<f64>,
    /// Probe-measured channel values, on probe rounds.
    pub probe_values: Option<Vec<f64>>,
    /// Raw multipliers after the round's dual step (empty when
    /// unconstrained).
    pub multiplier_raw: Vec<f64>,
    /// Squashed multiplier weights after the dual step.
    pub multiplier_weights: Vec<f64>,
    /// Constraint violations measured this round (these drove the dual step).
    pub violations: Vec<f64>,
    /// Adaptive KL coefficient after the round's controller step (`None` for
    /// methods without a KL penalty term).
    pub kl_coef: Option<f64>,
    /// Round mean of the minibatch surrogate losses.
    pub policy_loss: f64,
    /// Round means of the per-head value losses `[task, channel 1, …]`.
    pub value_losses: Vec<f64>,
}

/// Full log of a training run: one record per completed round, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub method: MethodKind,
    pub records: Vec<RunRecord>,
    /// Abort reason when a loss went non-finite; records up to the failing
    /// round are retained.
    pub aborted: Option<String>,
}

/// Mutable state of an ongoing run: policy, heads, reference, multipliers,
/// KL coefficient, and the run's random stream. Kept separate from the
/// method/config so threshold-search sessions can swap thresholds between
/// rounds while everything else persists.
#[derive(Debug, Clone)]
pub struct TrainState {
    policy: SoftmaxPolicy,
    heads: ValueHeads,
    reference: ReferencePolicy,
    lagrange: Option<LagrangeState>,
    kl_coef: f64,
    rng: ChaCha8Rng,
    env_steps: usize,
    update_index: usize,
}

impl TrainState {
    /// Validates method and config against the environment and builds the
    /// initial state. The policy starts as an exact copy of the reference
    /// policy (both drawn from the environment's reference seed), so the
    /// divergence starts at zero and the run seed affects only sampling.
    pub fn new(
        env: &GoodhartSpec,
        method: &MethodSpec,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        method.validate(env.num_channels())?;
        config.validate(env)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(env.reference_policy_seed());
        let policy = SoftmaxPolicy::init(
            env.vocab_size(),
            env.horizon(),
            config.top_k,
            config.policy_init_scale,
            &mut init_rng,
        );
        let reference = policy.freeze();
        let heads = ValueHeads::init(env.num_channels() + 1, env.vocab_size(), env.horizon());
        let lagrange = method.kind().constraint_mode().map(|mode| {
            LagrangeState::new(
                vec![mode; env.num_channels()],
                config.multiplier_lr.unwrap_or(10.0 * config.learning_rate),
                config.multiplier_momentum,
                config.multiplier_grad_form,
            )
        });
        Ok(TrainState {
            policy,
            heads,
            reference,
            lagrange,
            kl_coef: method.kl_coef_init(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            env_steps: 0,
            update_index: 0,
        })
    }

    pub fn policy(&self) -> &SoftmaxPolicy {
        &self.policy
    }

    pub fn heads(&self) -> &ValueHeads {
        &self.heads
    }

    pub fn reference(&self) -> &ReferencePolicy {
        &self.reference
    }

    pub fn lagrange(&self) -> Option<&LagrangeState> {
        self.lagrange.as_ref()
    }

    pub fn kl_coef(&self) -> f64 {
        self.kl_coef
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn update_index(&self) -> usize {
        self.update_index
    }

    /// One full update round: sample, estimate advantages, run the minibatch
    /// epochs, then step multipliers and KL coefficient. `probe` controls the
    /// gold-objective measurement.
    ///
    /// The method must match the one the state was built with in channel
    /// count and constraint structure; thresholds and weights may differ
    /// between calls.
    pub fn run_round(
        &mut self,
        env: &GoodhartSpec,
        method: &MethodSpec,
        config: &TrainConfig,
        probe: bool,
    ) -> Result<RunRecord, TrainError> {
        let n = env.num_channels();
        let horizon = env.horizon();
        let num_heads = n + 1;
        let episodes = config.steps_per_update / horizon;
        let total = episodes * horizon;
        let f_dim = self.policy.num_features();

        let (task_weight, channel_coefs) = match &self.lagrange {
            Some(state) => state.mixing_weights(),
            None => (1.0, vec![0.0; n]),
        };

        // Rollout buffers, flat over all of the round's steps.
        let mut features = Vec::with_capacity(total * f_dim);
        let mut actions: Vec<u32> = Vec::with_capacity(total);
        let mut old_lps: Vec<f64> = Vec::with_capacity(total);
        let mut mixed_adv: Vec<f64> = Vec::with_capacity(total);
        let mut targets: Vec<Vec<f64>> = vec![Vec::with_capacity(total); num_heads];
        let mut value_sums = vec![0.0; n];
        let mut kl_sum = 0.0;

        // Per-episode scratch.
        let mut task_rewards = Vec::with_capacity(horizon);
        let mut channel_rewards: Vec<Vec<f64>> = vec![Vec::with_capacity(horizon); n];
        let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(horizon); num_heads];
        let mut next_values: Vec<Vec<f64>> = vec![Vec::with_capacity(horizon); num_heads];

        for _ in 0..episodes {
            task_rewards.clear();
            for ch in channel_rewards.iter_mut() {
                ch.clear();
            }
            for v in values.iter_mut().chain(next_values.iter_mut()) {
                v.clear();
            }
            let mut state = EnvState::initial();
            for _ in 0..horizon {
                let phi = self.policy.features(&state);
                let (action, lp) = self.policy.act_from(&phi, &mut self.rng);
                let (next_state, reward, done) = env.step(&state, action)?;
                let kl_reward = self.reference.log_prob_from(&phi, action) - lp;
                let task = build_task_reward(method, &reward.channels, kl_reward, self.kl_coef);

                for h in 0..num_heads {
                    values[h].push(self.heads.predict_from(h, &phi));
                }
                if done {
                    for h in 0..num_heads {
                        next_values[h].push(0.0);
                    }
                } else {
                    let phi_next = self.policy.features(&next_state);
                    for h in 0..num_heads {
                        next_values[h].push(self.heads.predict_from(h, &phi_next));
                    }
                }

                kl_sum += -kl_reward;
                features.extend_from_slice(&phi);
                actions.push(action);
                old_lps.push(lp);
                task_rewards.push(task);
                for (ch, &r) in channel_rewards.iter_mut().zip(&reward.channels) {
                    ch.push(r);
                }
                state = next_state;
            }

            // Advantages per head, then the multiplier-weighted mixture.
            let deltas = advantage::compute_deltas(
                &task_rewards,
                &values[0],
                &next_values[0],
                config.discount,
            )
            .expect("rollout buffers grow in lockstep");
            let task_adv = advantage::gae(&deltas, config.discount, config.gae_lambda);
            let mut channel_advs = Vec::with_capacity(n);
            for i in 0..n {
                let deltas = advantage::compute_deltas(
                    &channel_rewards[i],
                    &values[i + 1],
                    &next_values[i + 1],
                    config.discount,
                )
                .expect("rollout buffers grow in lockstep");
                channel_advs.push(advantage::gae(&deltas, config.discount, config.gae_lambda));
            }
            let mixed =
                advantage::mix_advantages(&task_adv, &channel_advs, task_weight, &channel_coefs)
                    .expect("mixture lengths validated at construction");
            mixed_adv.extend_from_slice(&mixed);

            // Frozen-bootstrap value targets r + γ·v̄(s′).
            for t in 0..horizon {
                targets[0].push(task_rewards[t] + config.discount * next_values[0][t]);
            }
            for i in 0..n {
                for t in 0..horizon {
                    targets[i + 1]
                        .push(channel_rewards[i][t] + config.discount * next_values[i + 1][t]);
                }
            }

            // Constraint measurements: normalized rewards-to-go per channel.
            for i in 0..n {
                let nrtg =
                    advantage::normalized_rewards_to_go(&channel_rewards[i], config.discount);
                value_sums[i] += nrtg.iter().sum::<f64>();
            }
        }

        let measured_values: Vec<f64> = value_sums.iter().map(|s| s / total as f64).collect();
        let measured_kl = kl_sum / total as f64;

        // Minibatch epochs: one SGD step per minibatch on the combined
        // surrogate-plus-value loss, with gradients evaluated before any
        // weight moves.
        let head_coefs = config.head_coefficients(method, n);
        let mut index: Vec<usize> = (0..total).collect();
        let mut policy_loss_sum = 0.0;
        let mut value_loss_sums = vec![0.0; num_heads];
        let mut minibatches = 0usize;
        let mut policy_grad = vec![0.0; self.policy.weights().len()];
        let mut head_grads: Vec<Vec<f64>> = vec![vec![0.0; f_dim]; num_heads];

        for _ in 0..config.epochs_per_update {
            index.shuffle(&mut self.rng);
            for minibatch in index.chunks(config.batch_size) {
                let new_lps: Vec<f64> = minibatch
                    .iter()
                    .map(|&i| {
                        self.policy
                            .log_prob_from(&features[i * f_dim..(i + 1) * f_dim], actions[i])
                    })
                    .collect();
                let mb_old: Vec<f64> = minibatch.iter().map(|&i| old_lps[i]).collect();
                let mb_adv: Vec<f64> = minibatch.iter().map(|&i| mixed_adv[i]).collect();
                let (policy_loss, dloss_dlp) =
                    ppo_surrogate(&new_lps, &mb_old, &mb_adv, config.clip_ratio);

                for g in policy_grad.iter_mut() {
                    *g = 0.0;
                }
                for (j, &i) in minibatch.iter().enumerate() {
                    if dloss_dlp[j] != 0.0 {
                        self.policy.grad_log_prob_into(
                            &features[i * f_dim..(i + 1) * f_dim],
                            actions[i],
                            dloss_dlp[j],
                            &mut policy_grad,
                        );
                    }
                }

                let mut total_loss = policy_loss;
                let mut head_losses = vec![0.0; num_heads];
                for h in 0..num_heads {
                    let preds: Vec<f64> = minibatch
                        .iter()
                        .map(|&i| {
                            self.heads.predict_from(h, &features[i * f_dim..(i + 1) * f_dim])
                        })
                        .collect();
                    let mb_targets: Vec<f64> =
                        minibatch.iter().map(|&i| targets[h][i]).collect();
                    let (head_loss, dloss_dv) = value_loss(&preds, &mb_targets);
                    head_losses[h] = head_loss;
                    total_loss += head_coefs[h] * head_loss;
                    let grad = &mut head_grads[h];
                    for g in grad.iter_mut() {
                        *g = 0.0;
                    }
                    for (j, &i) in minibatch.iter().enumerate() {
                        if dloss_dv[j] != 0.0 {
                            let phi = &features[i * f_dim..(i + 1) * f_dim];
                            for (g, &p) in grad.iter_mut().zip(phi) {
                                *g += dloss_dv[j] * p;
                            }
                        }
                    }
                }

                if !total_loss.is_finite() {
                    return Err(TrainError::NumericalAbort(format!(
                        "non-finite loss at update round {} (policy loss {policy_loss}, value losses {head_losses:?})",
                        self.update_index + 1
                    )));
                }

                let lr = config.learning_rate;
                for (w, g) in self.policy.weights_mut().iter_mut().zip(&policy_grad) {
                    *w -= lr * g;
                }
                for h in 0..num_heads {
                    let coef = head_coefs[h];
                    for (w, g) in self.heads.head_mut(h).iter_mut().zip(&head_grads[h]) {
                        *w -= lr * coef * g;
                    }
                }

                policy_loss_sum += policy_loss;
                for (s, l) in value_loss_sums.iter_mut().zip(&head_losses) {
                    *s += l;
                }
                minibatches += 1;
            }
        }

        // Dual step from the round's measurements.
        let (violations, multiplier_raw, multiplier_weights) = match &mut self.lagrange {
            Some(state) => {
                let violations = state.violations(&measured_values, method.thresholds());
                state
                    .update(&measured_values, method.thresholds())
                    .expect("multiplier channel count fixed at construction");
                (violations, state.raw().to_vec(), state.weights())
            }
            None => (Vec::new(), Vec::new(), Vec::new()),
        };

        // KL-coefficient controller.
        if let Some(target) = method.kl_target() {
            if method.kind().carries_kl_penalty() {
                self.kl_coef = kl_coef_update(self.kl_coef, measured_kl, target, method.kl_lr());
            }
        }
        let kl_coef = method.kind().carries_kl_penalty().then_some(self.kl_coef);

        self.update_index += 1;
        self.env_steps += total;

        let (gold, probe_values) = if probe {
            let result = env.probe(&self.policy, config.probe_episodes, config.probe_seed);
            (Some(result.gold), Some(result.values))
        } else {
            (None, None)
        };

        Ok(RunRecord {
            update_index: self.update_index,
            env_steps: self.env_steps,
            values: measured_values,
            kl_value: measured_kl,
            gold,
            probe_values,
            multiplier_raw,
            multiplier_weights,
            violations,
            kl_coef,
            policy_loss: policy_loss_sum / minibatches as f64,
            value_losses: value_loss_sums.iter().map(|s| s / minibatches as f64).collect(),
        })
    }
}

/// Runs a method for the configured number of rounds. A non-finite loss stops
/// the run early and is reported in the log's `aborted` field (with all
/// completed records retained) rather than as an error.
pub fn train_run(
    env: &GoodhartSpec,
    method: &MethodSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunLog, TrainError> {
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
            Err(e) => return Err(e),
        }
    }
    Ok(RunLog { method: method.kind(), records, aborted })
}

/// Per-step task reward `r₀` for a method, from the step's channel scores and
/// KL reward.
pub fn build_task_reward(
    method: &MethodSpec,
    channels: &[f64],
    kl_reward: f64,
    kl_coef: f64,
) -> f64 {
    match method.kind() {
        MethodKind::MuPpo | MethodKind::XiPpo => kl_reward,
        MethodKind::PpoNoKl => dot(method.channel_weights(), channels),
        MethodKind::Ppo | MethodKind::AllPpo => {
            dot(method.channel_weights(), channels) + kl_coef * kl_reward
        }
        MethodKind::PpoSat => {
            let mut reward = 0.0;
            for ((&alpha, &r), &theta) in method
                .channel_weights()
                .iter()
                .zip(channels)
                .zip(method.thresholds())
            {
                let dev = r - theta;
                reward -= alpha * dev * dev;
            }
            reward + kl_coef * kl_reward
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Clipped-surrogate policy loss over one minibatch and its gradient with
/// respect to the new log-probabilities.
///
/// Loss: `−mean(min{ρÂ, clip(ρ, 1−ε, 1+ε)·Â})` with `ρ = exp(lp − lp_old)`.
/// The gradient flows through the unclipped branch wherever the min selects
/// it (ties included) and is zero where the clipped constant branch is
/// active.
pub fn ppo_surrogate(
    new_lps: &[f64],
    old_lps: &[f64],
    advantages: &[f64],
    clip_ratio: f64,
) -> (f64, Vec<f64>) {
    assert_eq!(new_lps.len(), old_lps.len(), "surrogate batch length mismatch");
    assert_eq!(new_lps.len(), advantages.len(), "surrogate batch length mismatch");
    let n = new_lps.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(new_lps.len());
    for ((&lp, &lp_old), &adv) in new_lps.iter().zip(old_lps).zip(advantages) {
        let ratio = (lp - lp_old).exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio) * adv;
        loss -= unclipped.min(clipped);
        // d(ρÂ)/d(lp) = ρÂ, so the per-sample contribution is −ρÂ/n on the
        // unclipped branch and 0 on the clipped branch.
        grads.push(if unclipped <= clipped { -unclipped / n } else { 0.0 });
    }
    (loss / n, grads)
}

/// Half-squared-error value loss over one minibatch and its gradient with
/// respect to the predictions: `mean(½(target − v)²)`, `d/dv = (v − target)/n`.
/// Targets carry the frozen bootstrap, so no gradient flows into them.
pub fn value_loss(predictions: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(predictions.len(), targets.len(), "value batch length mismatch");
    let n = predictions.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(predictions.len());
    for (&v, &target) in predictions.iter().zip(targets) {
        let delta = target - v;
        loss += 0.5 * delta * delta;
        grads.push((v - target) / n);
    }
    (loss / n, grads)
}

/// Multiplicative KL-coefficient controller:
/// `e = clip((KL − θ)/θ, −0.2, 0.2)`, `α ← α(1 + η·e)`.
pub fn kl_coef_update(coef: f64, measured_kl: f64, target: f64, lr: f64) -> f64 {
    let error = ((measured_kl - target) / target).clamp(-0.2, 0.2);
    coef * (1.0 + lr * error)
}
