//! The four-valued reward table over (classifier correct?, deferred?) and
//! the expected reward of the deferral policy under it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ProbabilityVector;

pub const KEEP: usize = 0;
pub const DEFER: usize = 1;

/// Reward per outcome cell. Serialized as `[a, b, c, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct RewardSignal {
    /// Classifier correct, kept.
    pub a: f64,
    /// Classifier correct, deferred.
    pub b: f64,
    /// Classifier incorrect, kept.
    pub c: f64,
    /// Classifier incorrect, deferred.
    pub d: f64,
}

impl From<[f64; 4]> for RewardSignal {
    fn from([a, b, c, d]: [f64; 4]) -> Self {
        Self { a, b, c, d }
    }
}

impl From<RewardSignal> for [f64; 4] {
    fn from(s: RewardSignal) -> Self {
        [s.a, s.b, s.c, s.d]
    }
}

impl Default for RewardSignal {
    /// `[0.5, 0.1, 0, 0.4]`.
    fn default() -> Self {
        Self::new(0.5, 0.1, 0.0, 0.4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeCell {
    KeepCorrect,
    DeferCorrect,
    KeepIncorrect,
    DeferIncorrect,
}

impl OutcomeCell {
    pub fn of(cl_correct: bool, deferred: bool) -> Self {
        match (cl_correct, deferred) {
            (true, false) => OutcomeCell::KeepCorrect,
            (true, true) => OutcomeCell::DeferCorrect,
            (false, false) => OutcomeCell::KeepIncorrect,
            (false, true) => OutcomeCell::DeferIncorrect,
        }
    }
}

impl RewardSignal {
    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    pub fn as_array(&self) -> [f64; 4] {
        (*self).into()
    }

    pub fn cell(&self, cell: OutcomeCell) -> f64 {
        match cell {
            OutcomeCell::KeepCorrect => self.a,
            OutcomeCell::DeferCorrect => self.b,
            OutcomeCell::KeepIncorrect => self.c,
            OutcomeCell::DeferIncorrect => self.d,
        }
    }

    /// `[reward if kept, reward if deferred]` for one example.
    pub fn row(&self, cl_correct: bool) -> [f64; 2] {
        if cl_correct {
            [self.a, self.b]
        } else {
            [self.c, self.d]
        }
    }

    pub fn max_entry(&self) -> f64 {
        self.as_array().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Accepts exactly the probability simplex (sum tolerance 1e-9).
pub fn validate_signal(signal: &RewardSignal) -> Result<()> {
    let v = signal.as_array();
    for (name, x) in ["a", "b", "c", "d"].iter().zip(v) {
        if !x.is_finite() {
            return Err(Error::Validation(format!("reward entry {name} is not finite")));
        }
        if x < 0.0 {
            return Err(Error::Validation(format!("reward entry {name} = {x} is negative")));
        }
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("reward entries sum to {s}, expected 1")));
    }
    Ok(())
}

/// `p_keep * r_keep + p_defer * r_defer` for the row selected by
/// `cl_correct`. `cl_correct` is a constant: no gradient flows through the
/// classifier's argmax.
pub fn per_example_reward(p_d: &ProbabilityVector, cl_correct: bool, signal: &RewardSignal) -> f64 {
    let r = signal.row(cl_correct);
    p_d[KEEP] * r[0] + p_d[DEFER] * r[1]
}

/// Gradient of [`per_example_reward`] with respect to the deferral-head
/// logits: `p_i (r_i - R)`.
pub fn reward_logit_grad(p_d: &ProbabilityVector, cl_correct: bool, signal: &RewardSignal) -> [f64; 2] {
    let r = signal.row(cl_correct);
    let total = per_example_reward(p_d, cl_correct, signal);
    [p_d[KEEP] * (r[0] - total), p_d[DEFER] * (r[1] - total)]
}

/// Mean expected reward over a batch.
pub fn batch_reward(batch: &[(ProbabilityVector, bool)], signal: &RewardSignal) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_reward of an empty batch"));
    }
    let total: f64 = batch
        .iter()
        .map(|(p, correct)| per_example_reward(p, *correct, signal))
        .sum();
    Ok(total / batch.len() as f64)
}

/// `[1 - d, 0, 0, d]`.
pub fn constrained_signal(d: f64) -> Result<RewardSignal> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::invalid(format!("deferral weight {d} outside [0, 1]")));
    }
    Ok(RewardSignal::new(1.0 - d, 0.0, 0.0, d))
}
