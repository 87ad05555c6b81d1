//! Linear-softmax policy over hand-built sequence features, linear value
//! heads, and the frozen reference policy that KL rewards are measured
//! against.
//!
//! The feature map is a token-count histogram (normalized by the horizon so
//! every entry stays in [0, 1]) concatenated with a one-hot step-index
//! encoding. Logits are a linear map of the features, and an optional top-k
//! truncation renormalizes the distribution over the k highest-logit tokens —
//! consistently for sampling *and* for log-probabilities, so importance ratios
//! computed from stored log-probs stay self-consistent under truncation.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, RngCore};

use crate::envs::EnvState;

/// Feature vector for a state: token-count histogram over the vocabulary
/// (counts divided by the horizon), then a one-hot step index with
/// `horizon + 1` slots so the terminal step still maps somewhere.
pub fn state_features(state: &EnvState, vocab_size: usize, horizon: usize) -> Vec<f64> {
    let mut features = vec![0.0; vocab_size + horizon + 1];
    for &token in state.tokens() {
        features[token as usize] += 1.0 / horizon as f64;
    }
    let step = state.step_index().min(horizon);
    features[vocab_size + step] = 1.0;
    features
}

/// Stochastic policy: softmax over `weightsᵀ · features`, optionally truncated
/// to the top-k logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    vocab_size: usize,
    horizon: usize,
    top_k: Option<usize>,
    /// Row-major `[num_features × vocab_size]`.
    weights: Vec<f64>,
}

impl SoftmaxPolicy {
    /// Fresh policy with weights drawn uniformly from `[-scale, scale]`
    /// (feature-major draw order). `scale = 0.0` gives the exactly uniform
    /// policy.
    pub fn init(
        vocab_size: usize,
        horizon: usize,
        top_k: Option<usize>,
        scale: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        assert!(vocab_size >= 2, "vocabulary needs at least 2 tokens");
        let features = vocab_size + horizon + 1;
        let weights = (0..features * vocab_size)
            .map(|_| rng.gen::<f64>() * 2.0 * scale - scale)
            .collect();
        SoftmaxPolicy { vocab_size, horizon, top_k, weights }
    }

    /// Rebuilds a policy from checkpointed weights.
    ///
    /// Panics when the weight count does not match the feature/vocab shape.
    pub fn from_weights(
        vocab_size: usize,
        horizon: usize,
        top_k: Option<usize>,
        weights: Vec<f64>,
    ) -> Self {
        let features = vocab_size + horizon + 1;
        assert_eq!(weights.len(), features * vocab_size, "weight count mismatch");
        SoftmaxPolicy { vocab_size, horizon, top_k, weights }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn top_k(&self) -> Option<usize> {
        self.top_k
    }

    pub fn num_features(&self) -> usize {
        self.vocab_size + self.horizon + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn features(&self, state: &EnvState) -> Vec<f64> {
        state_features(state, self.vocab_size, self.horizon)
    }

    pub(crate) fn logits_from(&self, features: &[f64]) -> Vec<f64> {
        debug_assert_eq!(features.len(), self.num_features());
        let a = self.vocab_size;
        let mut logits = vec![0.0; a];
        for (f, &phi) in features.iter().enumerate() {
            if phi == 0.0 {
                continue;
            }
            let row = &self.weights[f * a..(f + 1) * a];
            for (l, &w) in logits.iter_mut().zip(row) {
                *l += phi * w;
            }
        }
        logits
    }

    /// Support mask under top-k truncation: the k highest logits, ties broken
    /// toward the lower token index. Without top-k every token is in support.
    fn support(&self, logits: &[f64]) -> Vec<bool> {
        match self.top_k {
            None => vec![true; logits.len()],
            Some(k) if k >= logits.len() => vec![true; logits.len()],
            Some(k) => {
                let mut order: Vec<usize> = (0..logits.len()).collect();
                order.sort_by(|&a, &b| {
                    logits[b].total_cmp(&logits[a]).then_with(|| a.cmp(&b))
                });
                let mut mask = vec![false; logits.len()];
                for &idx in order.iter().take(k.max(1)) {
                    mask[idx] = true;
                }
                mask
            }
        }
    }

    /// Log-probabilities over the support (`-inf` outside it).
    fn log_probs_from(&self, features: &[f64]) -> Vec<f64> {
        let logits = self.logits_from(features);
        let mask = self.support(&logits);
        let mut max = f64::NEG_INFINITY;
        for (i, &l) in logits.iter().enumerate() {
            if mask[i] && l > max {
                max = l;
            }
        }
        let mut z = 0.0;
        for (i, &l) in logits.iter().enumerate() {
            if mask[i] {
                z += (l - max).exp();
            }
        }
        let log_z = max + z.ln();
        logits
            .iter()
            .enumerate()
            .map(|(i, &l)| if mask[i] { l - log_z } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Probabilities over the vocabulary (zero outside the top-k support).
    pub fn probs(&self, state: &EnvState) -> Vec<f64> {
        self.probs_from(&self.features(state))
    }

    pub(crate) fn probs_from(&self, features: &[f64]) -> Vec<f64> {
        self.log_probs_from(features)
            .iter()
            .map(|&lp| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() })
            .collect()
    }

    /// Samples an action by inverse CDF over the support (ascending token
    /// order) and returns it with its log-probability. The draw consumes
    /// exactly one `f64` from `rng`.
    pub fn act(&self, state: &EnvState, rng: &mut dyn RngCore) -> (u32, f64) {
        self.act_from(&self.features(state), rng)
    }

    pub(crate) fn act_from(&self, features: &[f64], rng: &mut dyn RngCore) -> (u32, f64) {
        let log_probs = self.log_probs_from(features);
        let u = rng.gen::<f64>();
        let mut cum = 0.0;
        let mut fallback = 0u32;
        for (a, &lp) in log_probs.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            fallback = a as u32;
            cum += lp.exp();
            if u < cum {
                return (a as u32, lp);
            }
        }
        // Floating-point shortfall in the cumulative sum: take the last
        // supported token.
        (fallback, log_probs[fallback as usize])
    }

    /// Log-probability of `action`, or `-inf` when top-k truncation excludes
    /// it — the explicit "excluded" signal.
    pub fn log_prob(&self, state: &EnvState, action: u32) -> f64 {
        self.log_prob_from(&self.features(state), action)
    }

    pub(crate) fn log_prob_from(&self, features: &[f64], action: u32) -> f64 {
        assert!((action as usize) < self.vocab_size, "action outside vocabulary");
        self.log_probs_from(features)[action as usize]
    }

    /// Per-step KL reward against the frozen reference:
    /// `−log(π(a|s) / π₀(a|s))`. Zero when the policies agree at `s`,
    /// increasingly negative as the policy diverges from the reference.
    pub fn kl_reward(&self, reference: &ReferencePolicy, state: &EnvState, action: u32) -> f64 {
        let features = self.features(state);
        self.kl_reward_from(reference, &features, action)
    }

    pub(crate) fn kl_reward_from(
        &self,
        reference: &ReferencePolicy,
        features: &[f64],
        action: u32,
    ) -> f64 {
        reference.log_prob_from(features, action) - self.log_prob_from(features, action)
    }

    /// Exact categorical KL divergence `KL[π(·|s) ‖ π₀(·|s)]` — a diagnostic;
    /// the training paths use the sampled per-step estimator instead. Infinite
    /// when the reference's support excludes an action the policy can take.
    pub fn kl_divergence(&self, reference: &ReferencePolicy, state: &EnvState) -> f64 {
        let features = self.features(state);
        let lp = self.log_probs_from(&features);
        let lp_ref = reference.inner.log_probs_from(&features);
        let mut kl = 0.0;
        for a in 0..self.vocab_size {
            if lp[a] == f64::NEG_INFINITY {
                continue;
            }
            kl += lp[a].exp() * (lp[a] - lp_ref[a]);
        }
        kl
    }

    /// Gradient of `log π(action|state)` with respect to the policy weights,
    /// flattened in the same `[num_features × vocab_size]` layout:
    /// `φ(s) ⊗ (onehot(action) − π(·|s))`, zero outside the top-k support.
    pub fn grad_log_prob(&self, state: &EnvState, action: u32) -> Vec<f64> {
        let features = self.features(state);
        let mut grad = vec![0.0; self.weights.len()];
        self.grad_log_prob_into(&features, action, 1.0, &mut grad);
        grad
    }

    /// Accumulates `scale · ∇ log π(action)` into `out` (same layout as
    /// `weights`). Shared by the public gradient op and the trainer's
    /// minibatch accumulation, which reuses one buffer across samples.
    pub(crate) fn grad_log_prob_into(
        &self,
        features: &[f64],
        action: u32,
        scale: f64,
        out: &mut [f64],
    ) {
        assert_eq!(out.len(), self.weights.len(), "gradient buffer shape mismatch");
        let probs = self.probs_from(features);
        let a = self.vocab_size;
        for (f, &phi) in features.iter().enumerate() {
            if phi == 0.0 {
                continue;
            }
            let row = &mut out[f * a..(f + 1) * a];
            for (j, slot) in row.iter_mut().enumerate() {
                let indicator = if j == action as usize { 1.0 } else { 0.0 };
                *slot += scale * phi * (indicator - probs[j]);
            }
        }
    }

    /// Frozen copy to measure divergence against.
    pub fn freeze(&self) -> ReferencePolicy {
        ReferencePolicy { inner: self.clone() }
    }
}

/// Immutable snapshot of the run-start policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    inner: SoftmaxPolicy,
}

impl ReferencePolicy {
    pub fn log_prob(&self, state: &EnvState, action: u32) -> f64 {
        self.inner.log_prob(state, action)
    }

    pub(crate) fn log_prob_from(&self, features: &[f64], action: u32) -> f64 {
        self.inner.log_prob_from(features, action)
    }

    /// Read-only view of the underlying policy (e.g. for evaluating the
    /// reference's own channel values).
    pub fn policy(&self) -> &SoftmaxPolicy {
        &self.inner
    }
}

/// `num_heads` independent linear value heads over the same state features.
/// Head 0 predicts task-reward values; heads `1..=N` predict channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHeads {
    vocab_size: usize,
    horizon: usize,
    /// One weight vector of `num_features` entries per head.
    weights: Vec<Vec<f64>>,
}

impl ValueHeads {
    /// All-zero heads (initial predictions are 0 everywhere).
    pub fn init(num_heads: usize, vocab_size: usize, horizon: usize) -> Self {
        assert!(num_heads >= 1, "need at least the task head");
        let features = vocab_size + horizon + 1;
        ValueHeads { vocab_size, horizon, weights: vec![vec![0.0; features]; num_heads] }
    }

    /// Rebuilds heads from checkpointed weights.
    ///
    /// Panics when any head's weight count does not match the feature shape.
    pub fn from_weights(vocab_size: usize, horizon: usize, weights: Vec<Vec<f64>>) -> Self {
        assert!(!weights.is_empty(), "need at least the task head");
        let features = vocab_size + horizon + 1;
        for head in &weights {
            assert_eq!(head.len(), features, "head weight count mismatch");
        }
        ValueHeads { vocab_size, horizon, weights }
    }

    pub fn num_heads(&self) -> usize {
        self.weights.len()
    }

    pub fn num_features(&self) -> usize {
        self.vocab_size + self.horizon + 1
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub(crate) fn head_mut(&mut self, head: usize) -> &mut [f64] {
        &mut self.weights[head]
    }

    /// Value prediction of one head. Panics when `head` is out of range.
    pub fn predict(&self, head: usize, state: &EnvState) -> f64 {
        assert!(head < self.weights.len(), "value head {head} out of range");
        let features = state_features(state, self.vocab_size, self.horizon);
        self.predict_from(head, &features)
    }

    pub(crate) fn predict_from(&self, head: usize, features: &[f64]) -> f64 {
        self.weights[head].iter().zip(features).map(|(w, phi)| w * phi).sum()
    }

    /// Gradient of any head's prediction with respect to that head's weights —
    /// for a linear head this is just the feature vector, shared across heads.
    pub fn grad(&self, state: &EnvState) -> Vec<f64> {
        state_features(state, self.vocab_size, self.horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GoodhartSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_state(tokens: &[u32], spec: &GoodhartSpec) -> EnvState {
        let mut state = EnvState::initial();
        for &t in tokens {
            let (next, _, _) = spec.step(&state, t).unwrap();
            state = next;
        }
        state
    }

    fn toy_policy(seed: u64, top_k: Option<usize>) -> SoftmaxPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SoftmaxPolicy::init(4, 3, top_k, 0.5, &mut rng)
    }

    fn toy_spec() -> GoodhartSpec {
        GoodhartSpec::new(vec![0.5], vec![1.0], vec![vec![0.0]], 3, 4, 0).unwrap()
    }

    #[test]
    fn log_prob_gradient_matches_central_differences() {
        let spec = toy_spec();
        let state = toy_state(&[1], &spec);
        let policy = toy_policy(42, None);
        let grad = policy.grad_log_prob(&state, 2);
        let h = 1e-6;
        for idx in 0..policy.weights().len() {
            let mut plus = policy.clone();
            plus.weights_mut()[idx] += h;
            let mut minus = policy.clone();
            minus.weights_mut()[idx] -= h;
            let fd = (plus.log_prob(&state, 2) - minus.log_prob(&state, 2)) / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!(
                (grad[idx] - fd).abs() / denom < 1e-5 || (grad[idx] - fd).abs() < 1e-9,
                "weight {idx}: analytic {} vs finite difference {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn sampled_log_prob_agrees_with_log_prob_query() {
        let spec = toy_spec();
        let state = toy_state(&[0, 2], &spec);
        let policy = toy_policy(7, None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (action, lp) = policy.act(&state, &mut rng);
            assert_eq!(lp, policy.log_prob(&state, action));
        }
    }

    #[test]
    fn top_k_excludes_low_logit_tokens_consistently() {
        let spec = toy_spec();
        let state = toy_state(&[], &spec);
        let policy = toy_policy(3, Some(2));
        let probs = policy.probs(&state);
        let in_support: Vec<usize> = (0..4).filter(|&a| probs[a] > 0.0).collect();
        assert_eq!(in_support.len(), 2);
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for a in 0..4u32 {
            let lp = policy.log_prob(&state, a);
            if in_support.contains(&(a as usize)) {
                assert!(lp.is_finite());
            } else {
                assert_eq!(lp, f64::NEG_INFINITY);
            }
        }
        // Sampling never leaves the support.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (action, _) = policy.act(&state, &mut rng);
            assert!(in_support.contains(&(action as usize)));
        }
    }

    #[test]
    fn top_k_ties_break_toward_lower_token_index() {
        // Zero weights: all logits tie, so top-2 must keep tokens 0 and 1.
        let policy = SoftmaxPolicy::from_weights(4, 3, Some(2), vec![0.0; (4 + 3 + 1) * 4]);
        let state = EnvState::initial();
        let probs = policy.probs(&state);
        assert_eq!(probs[0], 0.5);
        assert_eq!(probs[1], 0.5);
        assert_eq!(probs[2], 0.0);
        assert_eq!(probs[3], 0.0);
    }

    #[test]
    fn kl_reward_is_zero_against_self_and_penalizes_divergence() {
        let spec = toy_spec();
        let state = toy_state(&[1], &spec);
        let policy = toy_policy(11, None);
        let reference = policy.freeze();
        for a in 0..4 {
            assert_eq!(policy.kl_reward(&reference, &state, a), 0.0);
        }
        // Push token 2's logits up: its KL reward turns negative (the policy
        // now prefers it over the reference).
        let mut shifted = policy.clone();
        let a = shifted.vocab_size();
        for f in 0..shifted.num_features() {
            shifted.weights_mut()[f * a + 2] += 1.0;
        }
        assert!(shifted.kl_reward(&reference, &state, 2) < 0.0);
        assert!(shifted.kl_divergence(&reference, &state) > 0.0);
        assert!(policy.kl_divergence(&reference, &state).abs() < 1e-15);
    }

    #[test]
    fn value_heads_predict_linear_combinations_and_expose_feature_gradient() {
        let spec = toy_spec();
        let state = toy_state(&[2, 2], &spec);
        let features = state_features(&state, 4, 3);
        let mut heads = ValueHeads::init(2, 4, 3);
        for (i, w) in heads.head_mut(1).iter_mut().enumerate() {
            *w = i as f64 * 0.1;
        }
        assert_eq!(heads.predict(0, &state), 0.0);
        let expected: f64 = features.iter().enumerate().map(|(i, phi)| i as f64 * 0.1 * phi).sum();
        assert!((heads.predict(1, &state) - expected).abs() < 1e-15);
        assert_eq!(heads.grad(&state), features);
    }

    #[test]
    fn histogram_features_track_counts_and_step() {
        let spec = toy_spec();
        let state = toy_state(&[1, 1, 3], &spec);
        let features = state_features(&state, 4, 3);
        assert_eq!(features.len(), 4 + 3 + 1);
        assert!((features[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((features[3] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(features[0], 0.0);
        // Step 3 of horizon 3: terminal slot.
        assert_eq!(features[4 + 3], 1.0);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one_for_any_weights(seed in 0u64..1000, tokens in proptest::collection::vec(0u32..4, 0..3)) {
            let spec = toy_spec();
            let policy = toy_policy(seed, None);
            let state = toy_state(&tokens, &spec);
            let total: f64 = policy.probs(&state).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn score_function_gradient_sums_to_zero_over_actions(seed in 0u64..1000, action in 0u32..4) {
            // Σ_a π(a) ∇log π(a) = 0 is the score-function identity; here we
            // check the per-action gradient row sums match φ(s)·(1 − 1) = 0
            // when weighted by probabilities.
            let spec = toy_spec();
            let policy = toy_policy(seed, None);
            let state = toy_state(&[action], &spec);
            let probs = policy.probs(&state);
            let dim = policy.weights().len();
            let mut acc = vec![0.0; dim];
            for a in 0..4u32 {
                let g = policy.grad_log_prob(&state, a);
                for (slot, gi) in acc.iter_mut().zip(&g) {
                    *slot += probs[a as usize] * gi;
                }
            }
            for v in &acc {
                prop_assert!(v.abs() < 1e-12);
            }
        }
    }
}
