//! Goal-condition strategies and normalization.
//!
//! Raw goals are exact rationals (points, or points per step for the
//! averaged strategy). They are normalized to integer percentages of the
//! game's maximum score by truncation toward zero.

use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GoalError {
    #[error("reward list is empty")]
    EmptyRewards,
    #[error("max score must be positive, got {0}")]
    NonPositiveMax(i64),
    #[error("raw goal {raw} outside [0, {max}]")]
    OutOfRange { raw: Rational64, max: i64 },
    #[error("unknown goal strategy '{0}' (expected one of RTG, ImR, FinS, AvgRTG)")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GoalStrategy {
    /// Undiscounted sum of future rewards, current step included.
    #[serde(rename = "RTG")]
    ReturnToGo,
    /// Reward observed right after the action.
    #[serde(rename = "ImR")]
    ImmediateReward,
    /// Total trajectory reward, constant over the trajectory.
    #[serde(rename = "FinS")]
    FinalScore,
    /// Return-to-go divided by the remaining step count (current included).
    #[serde(rename = "AvgRTG")]
    AverageReturnToGo,
}

impl GoalStrategy {
    pub const ALL: [GoalStrategy; 4] = [
        GoalStrategy::ReturnToGo,
        GoalStrategy::ImmediateReward,
        GoalStrategy::FinalScore,
        GoalStrategy::AverageReturnToGo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GoalStrategy::ReturnToGo => "RTG",
            GoalStrategy::ImmediateReward => "ImR",
            GoalStrategy::FinalScore => "FinS",
            GoalStrategy::AverageReturnToGo => "AvgRTG",
        }
    }
}

impl fmt::Display for GoalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GoalStrategy {
    type Err = GoalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GoalStrategy::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| GoalError::UnknownStrategy(s.to_string()))
    }
}

/// Raw goal values for steps `0..=T` of a reward sequence.
pub fn compute_goals(rewards: &[i64], strategy: GoalStrategy) -> Result<Vec<Rational64>, GoalError> {
    if rewards.is_empty() {
        return Err(GoalError::EmptyRewards);
    }
    let n = rewards.len();
    // suffix[t] = sum of rewards[t..]
    let mut suffix = vec![0i64; n + 1];
    for t in (0..n).rev() {
        suffix[t] = suffix[t + 1] + rewards[t];
    }
    let goals = (0..n).map(|t| match strategy {
        GoalStrategy::ReturnToGo => Rational64::from_integer(suffix[t]),
        GoalStrategy::ImmediateReward => Rational64::from_integer(rewards[t]),
        GoalStrategy::FinalScore => Rational64::from_integer(suffix[0]),
        GoalStrategy::AverageReturnToGo => Rational64::new(suffix[t], (n - t) as i64),
    });
    Ok(goals.collect())
}

/// `int[100 · raw / max_score]` with truncation toward zero.
pub fn normalize_goal(raw: Rational64, max_score: i64) -> Result<u8, GoalError> {
    if max_score <= 0 {
        return Err(GoalError::NonPositiveMax(max_score));
    }
    if raw < Rational64::from_integer(0) || raw > Rational64::from_integer(max_score) {
        return Err(GoalError::OutOfRange { raw, max: max_score });
    }
    let scaled = raw * Rational64::from_integer(100) / Rational64::from_integer(max_score);
    Ok(scaled.to_integer() as u8)
}

/// Normalized goals for a reward sequence.
pub fn normalized_goals(
    rewards: &[i64],
    strategy: GoalStrategy,
    max_score: i64,
) -> Result<Vec<u8>, GoalError> {
    compute_goals(rewards, strategy)?
        .into_iter()
        .map(|g| normalize_goal(g, max_score))
        .collect()
}

/// Runtime goal update for manually supplied conditioning:
/// `g - reward / max_score`, floored at zero.
pub fn optimal_gc_update(g: Rational64, reward: i64, max_score: i64) -> Rational64 {
    let next = g - Rational64::new(reward, max_score);
    next.max(Rational64::from_integer(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ints(v: &[i64]) -> Vec<Rational64> {
        v.iter().map(|&x| Rational64::from_integer(x)).collect()
    }

    #[test]
    fn zero_rewards_give_zero_goals() {
        for s in GoalStrategy::ALL {
            assert_eq!(compute_goals(&[0, 0, 0], s).unwrap(), ints(&[0, 0, 0]));
        }
    }

    #[test]
    fn small_example_per_strategy() {
        let r = [1, 0, 2];
        assert_eq!(compute_goals(&r, GoalStrategy::ReturnToGo).unwrap(), ints(&[3, 2, 2]));
        assert_eq!(compute_goals(&r, GoalStrategy::FinalScore).unwrap(), ints(&[3, 3, 3]));
        assert_eq!(compute_goals(&r, GoalStrategy::ImmediateReward).unwrap(), ints(&[1, 0, 2]));
        assert_eq!(
            compute_goals(&r, GoalStrategy::AverageReturnToGo).unwrap(),
            ints(&[1, 1, 2])
        );
    }

    #[test]
    fn empty_rewards_rejected() {
        assert_eq!(compute_goals(&[], GoalStrategy::ReturnToGo), Err(GoalError::EmptyRewards));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_goal(Rational64::from_integer(175), 400), Ok(43));
        assert_eq!(normalize_goal(Rational64::from_integer(400), 400), Ok(100));
        assert_eq!(normalize_goal(Rational64::from_integer(0), 400), Ok(0));
        assert!(normalize_goal(Rational64::from_integer(401), 400).is_err());
        assert!(normalize_goal(Rational64::from_integer(-1), 400).is_err());
        assert!(normalize_goal(Rational64::from_integer(0), 0).is_err());
    }

    #[test]
    fn optimal_update_examples() {
        let one = Rational64::from_integer(1);
        assert_eq!(optimal_gc_update(one, 10, 40), Rational64::new(3, 4));
        assert_eq!(optimal_gc_update(Rational64::new(3, 4), 0, 40), Rational64::new(3, 4));
        assert_eq!(
            optimal_gc_update(Rational64::new(1, 4), 100, 400),
            Rational64::from_integer(0)
        );
        assert_eq!(
            optimal_gc_update(Rational64::new(1, 10), 100, 400),
            Rational64::from_integer(0)
        );
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in GoalStrategy::ALL {
            assert_eq!(s.name().parse::<GoalStrategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
            assert_eq!(serde_json::from_str::<GoalStrategy>(&json).unwrap(), s);
        }
        let err = "DTG".parse::<GoalStrategy>().unwrap_err().to_string();
        assert!(err.contains("RTG, ImR, FinS, AvgRTG"));
    }

    proptest! {
        #[test]
        fn rtg_recurrence_and_decomposition(rewards in prop::collection::vec(0i64..=10, 1..50)) {
            let rtg = compute_goals(&rewards, GoalStrategy::ReturnToGo).unwrap();
            let fins = compute_goals(&rewards, GoalStrategy::FinalScore).unwrap();
            let imr = compute_goals(&rewards, GoalStrategy::ImmediateReward).unwrap();
            let avg = compute_goals(&rewards, GoalStrategy::AverageReturnToGo).unwrap();
            let t_last = rewards.len() - 1;
            prop_assert_eq!(rtg[t_last], Rational64::from_integer(rewards[t_last]));
            for t in 0..t_last {
                prop_assert_eq!(rtg[t], Rational64::from_integer(rewards[t]) + rtg[t + 1]);
            }
            prop_assert!(fins.iter().all(|g| *g == fins[0]));
            prop_assert_eq!(fins[0], rtg[0]);
            prop_assert_eq!(imr.iter().sum::<Rational64>(), fins[0]);
            for t in 0..=t_last {
                let rest = &rewards[t..];
                let lo = Rational64::from_integer(*rest.iter().min().unwrap());
                let hi = Rational64::from_integer(*rest.iter().max().unwrap());
                prop_assert!(lo <= avg[t] && avg[t] <= hi);
            }
        }

        #[test]
        fn normalization_is_monotone(max in 1i64..1000, a in 0i64..1000, b in 0i64..1000) {
            let (a, b) = (a.min(max), b.min(max));
            let (lo, hi) = (a.min(b), a.max(b));
            let nlo = normalize_goal(Rational64::from_integer(lo), max).unwrap();
            let nhi = normalize_goal(Rational64::from_integer(hi), max).unwrap();
            prop_assert!(nlo <= nhi);
            prop_assert!(nhi <= 100);
        }
    }
}
