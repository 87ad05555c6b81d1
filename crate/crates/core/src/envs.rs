//! Synthetic sequence environments for studying proxy-reward overoptimization.
//!
//! An episode emits `horizon` tokens from a vocabulary. Each reward channel is
//! a deterministic token-set membership feature: the per-step channel reward is
//! 1.0 when the emitted token belongs to that channel's target set, else 0.0,
//! so a trajectory's per-channel value (the *mean* of its per-step rewards)
//! always lies in [0, 1] and is directly controllable by the policy.
//!
//! The gold evaluation is a known concave quadratic over channel values,
//!
//! ```text
//! g(v) = 1 − Σᵢ wᵢ (vᵢ − pᵢ)² − Σ_{i<j} Cᵢⱼ (vᵢ − pᵢ)(vⱼ − pⱼ)
//! ```
//!
//! with peak `p`, positive channel weights `w`, and a symmetric cross-term
//! matrix `C` whose off-diagonal entries model correlation between channels.
//! The constructor rejects any (w, C) whose quadratic form is not positive
//! definite, so `g(v) ≤ 1` always holds with equality exactly at `v = p`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg;
use crate::policy::SoftmaxPolicy;

/// Environment construction or stepping error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvError {
    /// The spec failed validation; the message names the offending field.
    InvalidSpec(String),
    /// `step` was called with a token outside the vocabulary.
    InvalidAction { action: u32, vocab_size: usize },
    /// `step` was called on a state that already reached the horizon.
    EpisodeComplete,
}

impl core::fmt::Display for EnvError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EnvError::InvalidSpec(why) => write!(f, "invalid environment spec: {why}"),
            EnvError::InvalidAction { action, vocab_size } => {
                write!(f, "action {action} outside vocabulary of size {vocab_size}")
            }
            EnvError::EpisodeComplete => write!(f, "episode already complete"),
        }
    }
}

impl core::error::Error for EnvError {}

/// Per-step reward bundle: `task` is the method-dependent scalar the trainer
/// fills in (the environment leaves it at 0.0), `channels` are the per-channel
/// membership rewards, each in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector {
    pub task: f64,
    pub channels: Vec<f64>,
}

/// Token sequence emitted so far. The step index is the sequence length, so
/// the two can never disagree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    tokens: Vec<u32>,
}

impl EnvState {
    /// Empty-sequence state at step 0.
    pub fn initial() -> Self {
        EnvState { tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn step_index(&self) -> usize {
        self.tokens.len()
    }
}

/// Immutable description of one synthetic environment.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodhartSpec {
    gold_peak: Vec<f64>,
    channel_weights: Vec<f64>,
    cross_terms: Vec<Vec<f64>>,
    horizon: usize,
    vocab_size: usize,
    reference_policy_seed: u64,
    channel_tokens: Vec<Vec<u32>>,
}

impl GoodhartSpec {
    /// Builds and validates a spec. The number of channels is the length of
    /// `gold_peak`; `channel_weights` must match it and be strictly positive,
    /// `cross_terms` must be a symmetric zero-diagonal matrix of the same
    /// size, and the implied quadratic form must be positive definite.
    ///
    /// Channel target sets default to disjoint blocks of
    /// `max(1, vocab_size / (2·(N+1)))` consecutive tokens starting at token
    /// 0; override them with [`GoodhartSpec::with_channel_tokens`].
    pub fn new(
        gold_peak: Vec<f64>,
        channel_weights: Vec<f64>,
        cross_terms: Vec<Vec<f64>>,
        horizon: usize,
        vocab_size: usize,
        reference_policy_seed: u64,
    ) -> Result<Self, EnvError> {
        let n = gold_peak.len();
        if n == 0 {
            return Err(EnvError::InvalidSpec("at least one channel required".into()));
        }
        if horizon == 0 {
            return Err(EnvError::InvalidSpec("horizon must be at least 1".into()));
        }
        if vocab_size < 2 {
            return Err(EnvError::InvalidSpec("vocabulary needs at least 2 tokens".into()));
        }
        if channel_weights.len() != n {
            return Err(EnvError::InvalidSpec(format!(
                "channel_weights has {} entries, expected {n}",
                channel_weights.len()
            )));
        }
        for (i, &p) in gold_peak.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(EnvError::InvalidSpec(format!(
                    "gold_peak[{i}] = {p} outside [0, 1]"
                )));
            }
        }
        for (i, &w) in channel_weights.iter().enumerate() {
            if !(w > 0.0) {
                return Err(EnvError::InvalidSpec(format!(
                    "channel_weights[{i}] = {w} must be positive"
                )));
            }
        }
        if cross_terms.len() != n || cross_terms.iter().any(|row| row.len() != n) {
            return Err(EnvError::InvalidSpec(format!("cross_terms must be {n}x{n}")));
        }
        for i in 0..n {
            if cross_terms[i][i] != 0.0 {
                return Err(EnvError::InvalidSpec(format!(
                    "cross_terms diagonal entry [{i}][{i}] must be 0 (weights carry the diagonal)"
                )));
            }
            for j in 0..n {
                if cross_terms[i][j] != cross_terms[j][i] {
                    return Err(EnvError::InvalidSpec(format!(
                        "cross_terms not symmetric at [{i}][{j}]"
                    )));
                }
            }
        }
        // Quadratic form matrix: weights on the diagonal, C/2 off it.
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = channel_weights[i];
            for j in 0..n {
                if i != j {
                    m[i * n + j] = cross_terms[i][j] / 2.0;
                }
            }
        }
        if !linalg::is_positive_definite(&m, n) {
            return Err(EnvError::InvalidSpec(
                "quadratic form (weights + cross terms) is not positive definite".into(),
            ));
        }
        if n > vocab_size {
            return Err(EnvError::InvalidSpec(format!(
                "{n} channels cannot share default token sets over {vocab_size} tokens"
            )));
        }
        let block = (vocab_size / (2 * (n + 1))).max(1);
        let channel_tokens = (0..n)
            .map(|i| ((i * block) as u32..((i + 1) * block) as u32).collect())
            .collect();
        Ok(GoodhartSpec {
            gold_peak,
            channel_weights,
            cross_terms,
            horizon,
            vocab_size,
            reference_policy_seed,
            channel_tokens,
        })
    }

    /// Replaces the channel target sets. Sets may overlap (overlap couples the
    /// channels) but each must be non-empty and within the vocabulary.
    pub fn with_channel_tokens(mut self, channel_tokens: Vec<Vec<u32>>) -> Result<Self, EnvError> {
        if channel_tokens.len() != self.num_channels() {
            return Err(EnvError::InvalidSpec(format!(
                "channel_tokens has {} sets, expected {}",
                channel_tokens.len(),
                self.num_channels()
            )));
        }
        for (i, set) in channel_tokens.iter().enumerate() {
            if set.is_empty() {
                return Err(EnvError::InvalidSpec(format!("channel_tokens[{i}] is empty")));
            }
            if let Some(&t) = set.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(EnvError::InvalidSpec(format!(
                    "channel_tokens[{i}] contains token {t} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        self.channel_tokens = channel_tokens;
        Ok(self)
    }

    /// The default two-channel sequence environment used across the test and
    /// acceptance suites: vocabulary 32, horizon 20, gold peak (0.23, 0.48),
    /// weights (4, 4), no cross term. Channel 1's token set {0..3} sits
    /// inside channel 2's {0..8}, so pushing channel 2 alone drags channel 1
    /// up the line v₁ = (4/9)·v₂ through value space, sweeping close past
    /// the gold peak before overshooting it. Channel 2's set is wide on
    /// purpose: its reference value sets the scale of the KL cost of raising
    /// the channel, and with a narrower set the peak's 0.48 would sit
    /// outside the band the squashed multipliers can hold against the KL
    /// anchor once channel 1's multiplier goes neutral.
    pub fn default_sequence(reference_policy_seed: u64) -> Self {
        GoodhartSpec::new(
            vec![0.23, 0.48],
            vec![4.0, 4.0],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            20,
            32,
            reference_policy_seed,
        )
        .expect("default sequence spec is valid")
        .with_channel_tokens(vec![vec![0, 1, 2, 3], vec![0, 1, 2, 3, 4, 5, 6, 7, 8]])
        .expect("default sequence token sets are valid")
    }

    /// One-step bandit variant for fast unit tests: vocabulary 4, horizon 1,
    /// disjoint singleton target sets.
    pub fn default_bandit(reference_policy_seed: u64) -> Self {
        GoodhartSpec::new(
            vec![0.5, 0.25],
            vec![2.0, 2.0],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            1,
            4,
            reference_policy_seed,
        )
        .expect("default bandit spec is valid")
        .with_channel_tokens(vec![vec![0], vec![1]])
        .expect("default bandit token sets are valid")
    }

    pub fn num_channels(&self) -> usize {
        self.gold_peak.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn reference_policy_seed(&self) -> u64 {
        self.reference_policy_seed
    }

    pub fn channel_tokens(&self) -> &[Vec<u32>] {
        &self.channel_tokens
    }

    pub fn channel_weights(&self) -> &[f64] {
        &self.channel_weights
    }

    pub fn cross_terms(&self) -> &[Vec<f64>] {
        &self.cross_terms
    }

    /// The channel-value vector that maximizes the gold evaluation. Phase-1
    /// estimation tries to recover this point without being told it.
    pub fn proxy_point_truth(&self) -> &[f64] {
        &self.gold_peak
    }

    /// Starts an episode: returns the empty-sequence state together with the
    /// stream all of the episode's stochastic draws should come from.
    /// Identical seeds give identical streams, so rollouts under the same
    /// policy are bitwise reproducible.
    pub fn reset(&self, seed: u64) -> (EnvState, ChaCha8Rng) {
        (EnvState::initial(), ChaCha8Rng::seed_from_u64(seed))
    }

    /// Appends `action` to the sequence. Returns the successor state, the
    /// per-channel membership rewards (task slot left at 0.0), and whether
    /// the episode just reached the horizon.
    pub fn step(
        &self,
        state: &EnvState,
        action: u32,
    ) -> Result<(EnvState, RewardVector, bool), EnvError> {
        if state.step_index() >= self.horizon {
            return Err(EnvError::EpisodeComplete);
        }
        if action as usize >= self.vocab_size {
            return Err(EnvError::InvalidAction { action, vocab_size: self.vocab_size });
        }
        let channels = self
            .channel_tokens
            .iter()
            .map(|set| if set.contains(&action) { 1.0 } else { 0.0 })
            .collect();
        let mut tokens = state.tokens.clone();
        tokens.push(action);
        let next = EnvState { tokens };
        let done = next.step_index() >= self.horizon;
        Ok((next, RewardVector { task: 0.0, channels }, done))
    }

    /// The analytic gold evaluation at a channel-value vector.
    pub fn gold_at(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.num_channels(), "channel-count mismatch");
        let n = self.num_channels();
        let mut g = 1.0;
        for i in 0..n {
            let d = values[i] - self.gold_peak[i];
            g -= self.channel_weights[i] * d * d;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                g -= self.cross_terms[i][j]
                    * (values[i] - self.gold_peak[i])
                    * (values[j] - self.gold_peak[j]);
            }
        }
        g
    }

    /// Monte-Carlo estimate of the policy's per-channel values: the mean over
    /// `num_episodes` seeded rollouts of each episode's per-step channel-reward
    /// mean. Deterministic given (spec, policy weights, seed).
    pub fn channel_values(
        &self,
        policy: &SoftmaxPolicy,
        num_episodes: usize,
        seed: u64,
    ) -> Vec<f64> {
        assert!(num_episodes > 0, "need at least one evaluation episode");
        let n = self.num_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut totals = vec![0.0; n];
        for _ in 0..num_episodes {
            let mut state = EnvState::initial();
            let mut sums = vec![0.0; n];
            for _ in 0..self.horizon {
                let (action, _) = policy.act(&state, &mut rng);
                let (next, reward, _) = self
                    .step(&state, action)
                    .expect("policy actions stay inside the vocabulary");
                for i in 0..n {
                    sums[i] += reward.channels[i];
                }
                state = next;
            }
            for i in 0..n {
                totals[i] += sums[i] / self.horizon as f64;
            }
        }
        totals.iter().map(|t| t / num_episodes as f64).collect()
    }

    /// Gold evaluation of a policy: `g` applied to the Monte-Carlo channel
    /// values from `num_episodes` seeded rollouts.
    pub fn gold_eval(&self, policy: &SoftmaxPolicy, num_episodes: usize, seed: u64) -> f64 {
        self.gold_at(&self.channel_values(policy, num_episodes, seed))
    }

    /// Channel values and gold evaluation from one shared set of rollouts, so
    /// the gold column of a measurement row is exactly `g` at the row's values.
    pub fn probe(&self, policy: &SoftmaxPolicy, num_episodes: usize, seed: u64) -> ProbeResult {
        let values = self.channel_values(policy, num_episodes, seed);
        let gold = self.gold_at(&values);
        ProbeResult { values, gold }
    }
}

/// Outcome of one evaluation probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub values: Vec<f64>,
    pub gold: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::SoftmaxPolicy;
    use rand::Rng;

    fn two_channel_spec(cross: f64) -> GoodhartSpec {
        GoodhartSpec::new(
            vec![0.23, 0.48],
            vec![4.0, 4.0],
            vec![vec![0.0, cross], vec![cross, 0.0]],
            20,
            32,
            7,
        )
        .unwrap()
    }

    #[test]
    fn constructor_rejects_indefinite_quadratic_form() {
        // Cross term 5 against weights (1, 1): eigenvalues 1 ± 2.5.
        let err = GoodhartSpec::new(
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            vec![vec![0.0, 5.0], vec![5.0, 0.0]],
            4,
            8,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, EnvError::InvalidSpec(_)));
    }

    #[test]
    fn constructor_rejects_asymmetric_cross_terms() {
        let err = GoodhartSpec::new(
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            vec![vec![0.0, 0.3], vec![0.2, 0.0]],
            4,
            8,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, EnvError::InvalidSpec(_)));
    }

    #[test]
    fn step_scores_token_set_membership() {
        let spec = GoodhartSpec::default_sequence(7);
        let state = EnvState::initial();
        // Token 2 belongs to both channel sets, token 9 to neither.
        let (state, reward, done) = spec.step(&state, 2).unwrap();
        assert_eq!(reward.channels, vec![1.0, 1.0]);
        assert_eq!(reward.task, 0.0);
        assert!(!done);
        let (state, reward, _) = spec.step(&state, 9).unwrap();
        assert_eq!(reward.channels, vec![0.0, 0.0]);
        assert_eq!(state.step_index(), 2);
        assert_eq!(state.tokens(), &[2, 9]);
    }

    #[test]
    fn step_rejects_bad_action_and_finished_episode() {
        let spec = GoodhartSpec::default_bandit(0);
        let state = EnvState::initial();
        assert_eq!(
            spec.step(&state, 4).unwrap_err(),
            EnvError::InvalidAction { action: 4, vocab_size: 4 }
        );
        let (done_state, _, done) = spec.step(&state, 0).unwrap();
        assert!(done);
        assert_eq!(spec.step(&done_state, 0).unwrap_err(), EnvError::EpisodeComplete);
    }

    #[test]
    fn gold_peaks_at_one_exactly_on_the_peak() {
        let spec = two_channel_spec(2.0);
        assert_eq!(spec.gold_at(&[0.23, 0.48]), 1.0);
        assert!(spec.gold_at(&[0.3, 0.48]) < 1.0);
        assert!(spec.gold_at(&[0.23, 0.4]) < 1.0);
        // Hand evaluation at (0.5, 0.3) with w = (4,4), C12 = 2:
        // 1 − 4·0.27² − 4·(−0.18)² − 2·0.27·(−0.18) = 1 − 0.2916 − 0.1296 + 0.0972
        let g = spec.gold_at(&[0.5, 0.3]);
        assert!((g - (1.0 - 0.2916 - 0.1296 + 0.0972)).abs() < 1e-12, "g = {g}");
    }

    #[test]
    fn cross_term_shifts_single_axis_argmax_away_from_peak() {
        // With the other channel held off-peak at c, the axis-restricted
        // argmax is p1 − C·(c − p2)/(2 w1) analytically; a grid argmax of the
        // raw quadratic must land there, not on the joint peak component.
        let spec = two_channel_spec(2.0);
        let c = 0.156;
        let expected = 0.23 - 2.0 * (c - 0.48) / (2.0 * 4.0);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=1000 {
            let v1 = k as f64 / 1000.0;
            let g = spec.gold_at(&[v1, c]);
            if g > best.0 {
                best = (g, v1);
            }
        }
        assert!((best.1 - expected).abs() <= 1e-3, "argmax {} vs {expected}", best.1);
        assert!((best.1 - 0.23).abs() > 0.05);
    }

    #[test]
    fn uniform_policy_channel_value_matches_set_fraction() {
        // Vocabulary 8 with a 2-token target set: a uniform policy hits the
        // set a quarter of the time, so the Monte-Carlo channel value should
        // sit near 0.25.
        let spec = GoodhartSpec::new(
            vec![0.5],
            vec![1.0],
            vec![vec![0.0]],
            4,
            8,
            0,
        )
        .unwrap()
        .with_channel_tokens(vec![vec![0, 1]])
        .unwrap();
        let uniform = SoftmaxPolicy::init(8, 4, None, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        let v = spec.channel_values(&uniform, 4000, 11);
        assert!((v[0] - 0.25).abs() < 0.02, "v = {}", v[0]);
    }

    #[test]
    fn reset_streams_are_reproducible() {
        let spec = GoodhartSpec::default_sequence(7);
        let (s1, mut r1) = spec.reset(99);
        let (s2, mut r2) = spec.reset(99);
        assert_eq!(s1, s2);
        assert_eq!(s1.step_index(), 0);
        let a: u64 = r1.gen();
        let b: u64 = r2.gen();
        assert_eq!(a, b);
    }

    #[test]
    fn probe_gold_is_exactly_g_of_probe_values() {
        let spec = GoodhartSpec::default_sequence(7);
        let policy = SoftmaxPolicy::init(32, 20, None, 0.01, &mut ChaCha8Rng::seed_from_u64(3));
        let probe = spec.probe(&policy, 16, 5);
        assert_eq!(probe.gold, spec.gold_at(&probe.values));
        let again = spec.probe(&policy, 16, 5);
        assert_eq!(probe, again);
    }
}
