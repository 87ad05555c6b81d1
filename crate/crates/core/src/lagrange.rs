//! Lagrange-multiplier state for constrained training.
//!
//! Each constrained channel carries one unconstrained raw variable that a
//! squash maps into a mixing weight: a sigmoid for inequality constraints
//! (weight in (0, 1)) and a tanh for equality constraints (weight in (−1, 1),
//! so the sign itself can flip the pressure direction). Dual ascent moves the
//! raw variable along the constraint violation with SGD momentum, and the
//! mixing weights rebalance the advantage mixture so the total weight —
//! task plus channel magnitudes — always equals the channel count exactly.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

pub use crate::advantage::LengthMismatch;

/// Constraint direction for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    /// Keep the measured value at or above the threshold (`v ≥ θ`).
    InequalityGe,
    /// Keep the measured value at or below the threshold (`v ≤ θ`).
    InequalityLe,
    /// Pin the measured value to the threshold (`v = θ`).
    Equality,
}

impl ConstraintMode {
    /// Squash from raw multiplier space into mixing-weight space.
    fn squash(self, raw: f64) -> f64 {
        match self {
            ConstraintMode::InequalityGe | ConstraintMode::InequalityLe => {
                1.0 / (1.0 + (-raw).exp())
            }
            ConstraintMode::Equality => raw.tanh(),
        }
    }

    /// Derivative of the squash at `raw`, expressed through the squash value.
    fn squash_derivative(self, squash_value: f64) -> f64 {
        match self {
            ConstraintMode::InequalityGe | ConstraintMode::InequalityLe => {
                squash_value * (1.0 - squash_value)
            }
            ConstraintMode::Equality => 1.0 - squash_value * squash_value,
        }
    }

    /// Sign applied to the channel's advantage in the mixture: upper-bound
    /// channels push the measured value *down*, everything else pushes up.
    fn direction(self) -> f64 {
        match self {
            ConstraintMode::InequalityLe => -1.0,
            _ => 1.0,
        }
    }

    /// Raw-space ascent direction for the multiplier: positive exactly when
    /// the constraint is violated in its own direction (equality channels
    /// treat any shortfall as positive, any excess as negative, which is what
    /// steers the tanh weight's sign).
    pub fn violation(self, measured: f64, threshold: f64) -> f64 {
        match self {
            ConstraintMode::InequalityGe | ConstraintMode::Equality => threshold - measured,
            ConstraintMode::InequalityLe => measured - threshold,
        }
    }
}

/// How the violation is scaled before entering the momentum buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MultiplierGradForm {
    /// Chain rule through the squash: scale by the squash derivative.
    #[default]
    ChainRule,
    /// Scale by the squash value itself (multiplier-magnitude scaling).
    /// Equality channels keep the chain rule — their squash value is 0 at
    /// initialization, which would freeze the multiplier permanently.
    SquashValue,
}

/// Raw multipliers, their momentum buffers, and the update hyperparameters
/// for every constrained channel of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeState {
    modes: Vec<ConstraintMode>,
    raw: Vec<f64>,
    momentum_buffer: Vec<f64>,
    learning_rate: f64,
    momentum: f64,
    grad_form: MultiplierGradForm,
}

impl LagrangeState {
    /// Fresh state with every raw variable and momentum buffer at zero —
    /// inequality weights start at 0.5, equality weights at 0.
    pub fn new(
        modes: Vec<ConstraintMode>,
        learning_rate: f64,
        momentum: f64,
        grad_form: MultiplierGradForm,
    ) -> Self {
        let n = modes.len();
        LagrangeState {
            modes,
            raw: vec![0.0; n],
            momentum_buffer: vec![0.0; n],
            learning_rate,
            momentum,
            grad_form,
        }
    }

    /// Restores a state from checkpointed raw variables and buffers.
    pub fn from_parts(
        modes: Vec<ConstraintMode>,
        learning_rate: f64,
        momentum: f64,
        grad_form: MultiplierGradForm,
        raw: Vec<f64>,
        momentum_buffer: Vec<f64>,
    ) -> Result<Self, LengthMismatch> {
        if raw.len() != modes.len() {
            return Err(LengthMismatch { expected: modes.len(), got: raw.len() });
        }
        if momentum_buffer.len() != modes.len() {
            return Err(LengthMismatch { expected: modes.len(), got: momentum_buffer.len() });
        }
        Ok(LagrangeState { modes, raw, momentum_buffer, learning_rate, momentum, grad_form })
    }

    pub fn num_channels(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[ConstraintMode] {
        &self.modes
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.momentum_buffer
    }

    /// Squash values `sᵢ` per channel (the multiplier magnitudes, signed for
    /// equality channels).
    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().zip(&self.raw).map(|(mode, &raw)| mode.squash(raw)).collect()
    }

    /// Coefficients for the advantage mixture: the task-advantage weight
    /// `N − Σᵢ |sᵢ|` and per-channel coefficients `dᵢ·sᵢ` (direction times
    /// squash value). The task weight plus the channel magnitudes always sums
    /// to the channel count.
    pub fn mixing_weights(&self) -> (f64, Vec<f64>) {
        let weights = self.weights();
        let magnitude: f64 = weights.iter().map(|s| s.abs()).sum();
        let coefficients = self
            .modes
            .iter()
            .zip(&weights)
            .map(|(mode, &s)| mode.direction() * s)
            .collect();
        (self.modes.len() as f64 - magnitude, coefficients)
    }

    /// Per-channel violations for the given measurements.
    pub fn violations(&self, measured: &[f64], thresholds: &[f64]) -> Vec<f64> {
        self.modes
            .iter()
            .zip(measured)
            .zip(thresholds)
            .map(|((mode, &v), &t)| mode.violation(v, t))
            .collect()
    }

    /// One dual-ascent step from measured channel values: scale each
    /// violation by the configured gradient form, fold it into the momentum
    /// buffer (`b ← m·b + g`), and move the raw variable (`raw ← raw + lr·b`).
    pub fn update(&mut self, measured: &[f64], thresholds: &[f64]) -> Result<(), LengthMismatch> {
        if measured.len() != self.modes.len() {
            return Err(LengthMismatch { expected: self.modes.len(), got: measured.len() });
        }
        if thresholds.len() != self.modes.len() {
            return Err(LengthMismatch { expected: self.modes.len(), got: thresholds.len() });
        }
        for i in 0..self.modes.len() {
            let mode = self.modes[i];
            let violation = mode.violation(measured[i], thresholds[i]);
            let s = mode.squash(self.raw[i]);
            let factor = match (self.grad_form, mode) {
                (MultiplierGradForm::ChainRule, _) | (_, ConstraintMode::Equality) => {
                    mode.squash_derivative(s)
                }
                (MultiplierGradForm::SquashValue, _) => s,
            };
            let grad = violation * factor;
            self.momentum_buffer[i] = self.momentum * self.momentum_buffer[i] + grad;
            self.raw[i] += self.learning_rate * self.momentum_buffer[i];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_update_matches_hand_computed_gradient_step() {
        // Shortfall constraint v ≥ 0.5 with measured 0.3: violation 0.2,
        // sigmoid derivative at raw 0 is 0.25, so one step at lr 0.1 moves the
        // raw multiplier to exactly 0.1·(0.2·0.25) = 0.005.
        let mut state = LagrangeState::new(
            vec![ConstraintMode::InequalityGe],
            0.1,
            0.0,
            MultiplierGradForm::ChainRule,
        );
        state.update(&[0.3], &[0.5]).unwrap();
        assert_eq!(state.raw()[0], 0.1 * ((0.5 - 0.3) * 0.25));
        assert!((state.raw()[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn momentum_buffer_follows_the_sgd_recursion() {
        let lr = 0.1;
        let m = 0.1;
        let mut state = LagrangeState::new(
            vec![ConstraintMode::InequalityGe],
            lr,
            m,
            MultiplierGradForm::ChainRule,
        );
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut raw = 0.0;
        let mut buffer = 0.0;
        for _ in 0..5 {
            state.update(&[0.3], &[0.5]).unwrap();
            let s = sigmoid(raw);
            let grad = (0.5 - 0.3) * (s * (1.0 - s));
            buffer = m * buffer + grad;
            raw += lr * buffer;
            assert!((state.raw()[0] - raw).abs() < 1e-15);
            assert!((state.momentum_buffer()[0] - buffer).abs() < 1e-15);
        }
        // With a constant gradient the buffer is the geometric partial sum
        // g·(1−mᵏ)/(1−m); after 5 steps of a slowly-moving sigmoid it should
        // sit near that closed form for the initial gradient.
        let g0 = 0.2 * 0.25;
        let closed_form = g0 * (1.0 - m.powi(5)) / (1.0 - m);
        assert!((state.momentum_buffer()[0] - closed_form).abs() < 1e-3);
    }

    #[test]
    fn violation_signs_follow_constraint_direction() {
        assert_eq!(ConstraintMode::InequalityGe.violation(0.3, 0.5), 0.5 - 0.3);
        assert_eq!(ConstraintMode::InequalityLe.violation(0.3, 0.5), 0.3 - 0.5);
        assert_eq!(ConstraintMode::Equality.violation(0.7, 0.5), 0.5 - 0.7);
        // A satisfied shortfall constraint pushes the multiplier back down.
        assert!(ConstraintMode::InequalityGe.violation(0.9, 0.5) < 0.0);
        // A satisfied cap constraint does the same.
        assert!(ConstraintMode::InequalityLe.violation(0.1, 0.5) < 0.0);
    }

    #[test]
    fn mixing_weights_sum_to_channel_count_exactly() {
        let state = LagrangeState::from_parts(
            vec![ConstraintMode::InequalityGe, ConstraintMode::InequalityLe, ConstraintMode::Equality],
            0.1,
            0.1,
            MultiplierGradForm::ChainRule,
            vec![0.7, -0.3, -1.2],
            vec![0.0; 3],
        )
        .unwrap();
        let (task_weight, coefficients) = state.mixing_weights();
        let magnitude: f64 = coefficients.iter().map(|c| c.abs()).sum();
        assert_eq!(task_weight + magnitude, 3.0);
        // Cap channel carries a negative coefficient; the equality channel's
        // sign follows its tanh (negative raw here).
        assert!(coefficients[0] > 0.0);
        assert!(coefficients[1] < 0.0);
        assert!(coefficients[2] < 0.0);
    }

    #[test]
    fn fresh_state_starts_inequalities_at_half_weight_and_equalities_at_zero() {
        let state = LagrangeState::new(
            vec![ConstraintMode::InequalityGe, ConstraintMode::Equality],
            0.1,
            0.1,
            MultiplierGradForm::ChainRule,
        );
        assert_eq!(state.weights(), vec![0.5, 0.0]);
        let (task_weight, coefficients) = state.mixing_weights();
        assert_eq!(task_weight, 1.5);
        assert_eq!(coefficients, vec![0.5, 0.0]);
    }

    #[test]
    fn squash_value_form_scales_by_the_multiplier_instead_of_its_derivative() {
        let mut chain = LagrangeState::new(
            vec![ConstraintMode::InequalityGe],
            0.1,
            0.0,
            MultiplierGradForm::ChainRule,
        );
        let mut value_form = LagrangeState::new(
            vec![ConstraintMode::InequalityGe],
            0.1,
            0.0,
            MultiplierGradForm::SquashValue,
        );
        chain.update(&[0.3], &[0.5]).unwrap();
        value_form.update(&[0.3], &[0.5]).unwrap();
        // σ(0) = 0.5 versus σ′(0) = 0.25: the value form takes twice the step.
        assert_eq!(value_form.raw()[0], 2.0 * chain.raw()[0]);
        // Equality channels ignore the flag (tanh(0) = 0 would freeze them).
        let mut eq = LagrangeState::new(
            vec![ConstraintMode::Equality],
            0.1,
            0.0,
            MultiplierGradForm::SquashValue,
        );
        eq.update(&[0.3], &[0.5]).unwrap();
        assert!(eq.raw()[0] > 0.0);
    }

    #[test]
    fn update_rejects_mismatched_measurements() {
        let mut state = LagrangeState::new(
            vec![ConstraintMode::InequalityGe; 2],
            0.1,
            0.1,
            MultiplierGradForm::ChainRule,
        );
        assert!(state.update(&[0.1], &[0.5, 0.5]).is_err());
        assert!(state.update(&[0.1, 0.2], &[0.5]).is_err());
    }

    proptest! {
        #[test]
        fn weight_invariant_holds_for_arbitrary_raw_values(
            raw in proptest::collection::vec(-6.0f64..6.0, 3),
            mode_bits in proptest::collection::vec(0u8..3, 3),
        ) {
            let modes: Vec<ConstraintMode> = mode_bits
                .iter()
                .map(|b| match b {
                    0 => ConstraintMode::InequalityGe,
                    1 => ConstraintMode::InequalityLe,
                    _ => ConstraintMode::Equality,
                })
                .collect();
            let state = LagrangeState::from_parts(
                modes,
                0.1,
                0.1,
                MultiplierGradForm::ChainRule,
                raw,
                vec![0.0; 3],
            )
            .unwrap();
            let (task_weight, coefficients) = state.mixing_weights();
            let magnitude: f64 = coefficients.iter().map(|c| c.abs()).sum();
            prop_assert!((task_weight + magnitude - 3.0).abs() < 1e-12);
            prop_assert!(task_weight <= 3.0);
            prop_assert!(task_weight >= 0.0);
            for s in state.weights() {
                prop_assert!(s > -1.0 && s < 1.0);
            }
        }
    }
}
