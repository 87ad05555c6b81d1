//! Per-episode advantage estimation: one-step temporal-difference residuals,
//! generalized advantage estimation, discounted rewards-to-go, and the
//! multiplier-weighted mixture that folds constraint channels into a single
//! advantage signal.
//!
//! Everything here is a pure function over slices; the trainer applies them
//! episode by episode (bootstrap values are the caller's job, with 0 passed
//! for terminal successors).

use alloc::vec::Vec;

use core::fmt;

/// Parallel-slice length disagreement in an advantage computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthMismatch {
    pub expected: usize,
    pub got: usize,
}

impl fmt::Display for LengthMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parallel slices disagree in length: expected {}, got {}", self.expected, self.got)
    }
}

impl core::error::Error for LengthMismatch {}

/// One-step TD residuals `δₜ = rₜ + γ·v(sₜ₊₁) − v(sₜ)`.
///
/// `next_values[t]` is the (frozen) value of the successor state; pass 0 for
/// the terminal step so the bootstrap vanishes there.
pub fn compute_deltas(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    discount: f64,
) -> Result<Vec<f64>, LengthMismatch> {
    if values.len() != rewards.len() {
        return Err(LengthMismatch { expected: rewards.len(), got: values.len() });
    }
    if next_values.len() != rewards.len() {
        return Err(LengthMismatch { expected: rewards.len(), got: next_values.len() });
    }
    Ok(rewards
        .iter()
        .zip(values)
        .zip(next_values)
        .map(|((&r, &v), &v_next)| r + discount * v_next - v)
        .collect())
}

/// Generalized advantage estimation over one episode's TD residuals:
/// the backward recursion `Âₜ = δₜ + γλ·Âₜ₊₁` with `Â` past the final step
/// equal to 0.
pub fn gae(deltas: &[f64], discount: f64, lambda: f64) -> Vec<f64> {
    let mut advantages = deltas.to_vec();
    let mut carry = 0.0;
    for a in advantages.iter_mut().rev() {
        *a += discount * lambda * carry;
        carry = *a;
    }
    advantages
}

/// Discounted rewards-to-go `Gₜ = Σ_{k≥t} γ^{k−t} r_k`, computed backward so
/// each entry costs one multiply-add.
pub fn rewards_to_go(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut returns = rewards.to_vec();
    let mut carry = 0.0;
    for g in returns.iter_mut().rev() {
        *g += discount * carry;
        carry = *g;
    }
    returns
}

/// Rewards-to-go divided by the discounted count of remaining steps,
/// `Σ_{k=0}^{T−1−t} γ^k`, so a constant per-step reward `c` maps to exactly
/// `c` at every index. This keeps measured channel values on the same [0, 1]
/// scale as constraint thresholds regardless of horizon or discount.
pub fn normalized_rewards_to_go(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut returns = rewards.to_vec();
    let mut carry = 0.0;
    let mut weight_carry = 0.0;
    for g in returns.iter_mut().rev() {
        *g += discount * carry;
        carry = *g;
        weight_carry = 1.0 + discount * weight_carry;
        *g /= weight_carry;
    }
    returns
}

/// Mixes task and per-channel advantages with the coefficients produced by
/// the multiplier state: `A_mix[t] = task_weight·A₀[t] + Σᵢ cᵢ·Aᵢ[t]`.
///
/// Channel coefficients already carry their constraint-direction sign, so
/// this is a plain weighted sum.
pub fn mix_advantages(
    task: &[f64],
    channels: &[Vec<f64>],
    task_weight: f64,
    channel_coefficients: &[f64],
) -> Result<Vec<f64>, LengthMismatch> {
    if channel_coefficients.len() != channels.len() {
        return Err(LengthMismatch { expected: channels.len(), got: channel_coefficients.len() });
    }
    for channel in channels {
        if channel.len() != task.len() {
            return Err(LengthMismatch { expected: task.len(), got: channel.len() });
        }
    }
    let mut mixed: Vec<f64> = task.iter().map(|&a| task_weight * a).collect();
    for (channel, &coef) in channels.iter().zip(channel_coefficients) {
        for (m, &a) in mixed.iter_mut().zip(channel) {
            *m += coef * a;
        }
    }
    Ok(mixed)
}
