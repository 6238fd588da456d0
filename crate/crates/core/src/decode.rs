//! Goal selection by exponential tilt and action decoding.
//!
//! At each step the model is primed with `GC:` and its next-token
//! distribution is read over the 101 goal tokens. A goal is picked from that
//! distribution (or supplied externally), force-fed together with the
//! `</s></s> Action:` template, and the action is decoded after it.

use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{parse_output, Vocabulary, MAX_GOAL};
use crate::goals::normalize_goal;
use crate::model::{EncodedContext, ModelError, Seq2Seq};

/// Goal-token mass below which the model is considered to have produced no
/// goal at all.
pub const MIN_GOAL_MASS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("goal-token mass {0:e} below threshold")]
    NoGoalMass(f64),
    #[error("no closing delimiter within {0} output tokens")]
    NoDelimiter(usize),
    #[error("unparseable output: {0:?}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid policy {0:?}: expected tilt:<alpha>, optimal, or fixed:<0-100>")]
pub struct PolicyParseError(String);

/// How the goal condition is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GoalMode {
    PredictedTilt { alpha: f64 },
    /// Starts at full score and is decremented by observed rewards; needs the
    /// game's maximum score.
    OptimalManual,
    Fixed(u8),
}

impl fmt::Display for GoalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoalMode::PredictedTilt { alpha } => write!(f, "tilt:{alpha}"),
            GoalMode::OptimalManual => f.write_str("optimal"),
            GoalMode::Fixed(g) => write!(f, "fixed:{g}"),
        }
    }
}

impl FromStr for GoalMode {
    type Err = PolicyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PolicyParseError(s.to_string());
        let s = s.trim();
        if s == "optimal" {
            return Ok(GoalMode::OptimalManual);
        }
        match s.split_once(':') {
            Some(("tilt", a)) => {
                let alpha: f64 = a.parse().map_err(|_| bad())?;
                if alpha.is_finite() && alpha >= 0.0 {
                    Ok(GoalMode::PredictedTilt { alpha })
                } else {
                    Err(bad())
                }
            }
            Some(("fixed", g)) => match g.parse::<u8>() {
                Ok(g) if g <= MAX_GOAL => Ok(GoalMode::Fixed(g)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for GoalMode {
    type Error = PolicyParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<GoalMode> for String {
    fn from(m: GoalMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionDecoding {
    /// Free generation until the closing delimiter.
    #[default]
    Greedy,
    /// Highest-likelihood action among the observation's candidates.
    Constrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub mode: GoalMode,
    #[serde(default)]
    pub action_decoding: ActionDecoding,
}

impl DecodePolicy {
    pub fn new(mode: GoalMode) -> Self {
        DecodePolicy {
            mode,
            action_decoding: ActionDecoding::Greedy,
        }
    }
}

/// The model's distribution over goal values, renormalized over the goal
/// tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalDistribution {
    pub probs: Vec<f64>,
    /// Total probability of the goal tokens before renormalization.
    pub support_mass: f64,
}

impl GoalDistribution {
    /// Normalizes `weights` (indexed by goal value) into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<GoalDistribution, DecodeError> {
        assert_eq!(weights.len(), MAX_GOAL as usize + 1);
        let mass: f64 = weights.iter().sum();
        if !(mass >= MIN_GOAL_MASS) {
            return Err(DecodeError::NoGoalMass(mass));
        }
        Ok(GoalDistribution {
            probs: weights.iter().map(|w| w / mass).collect(),
            support_mass: mass,
        })
    }

    pub fn mode(&self) -> u8 {
        tilt_select(&self.probs, 0.0)
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// `argmax_g log P(g) + alpha * g / 100` over goals with positive mass; ties
/// go to the larger g. `probs` need not be normalized.
pub fn tilt_select(probs: &[f64], alpha: f64) -> u8 {
    let mut best: Option<(f64, usize)> = None;
    for (g, &p) in probs.iter().enumerate() {
        if !(p > 0.0) {
            continue;
        }
        let score = p.ln() + alpha * g as f64 / 100.0;
        if best.map_or(true, |(s, _)| score >= s) {
            best = Some((score, g));
        }
    }
    best.map_or(0, |(_, g)| g as u8)
}

/// Goal distribution at the position following `GC:`.
pub fn goal_distribution(model: &Seq2Seq, vocab: &Vocabulary, ctx: &EncodedContext) -> Result<GoalDistribution, DecodeError> {
    let next = model.next_distribution(ctx, &[vocab.goal_mark()])?;
    let weights = (0..=MAX_GOAL).map(|g| next[vocab.goal_token(g) as usize]).collect();
    GoalDistribution::from_weights(weights)
}

/// Goal token to render under optimal-GC conditioning for the running
/// fraction `running` of the maximum score.
pub fn optimal_goal(running: Rational64, max_score: i64) -> u8 {
    normalize_goal(running * max_score, max_score).expect("running goal stays within [0, 1]")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub goal: u8,
    pub action: String,
    /// Present when the goal was read from the model.
    pub distribution: Option<GoalDistribution>,
}

/// One decoding step on an encoded context. `given_goal` overrides the
/// model's goal prediction (fixed and optimal-GC modes); otherwise the goal
/// is tilt-selected with `alpha`.
pub fn decode_step(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    input: &[u32],
    policy: &DecodePolicy,
    given_goal: Option<u8>,
    candidates: &[String],
) -> Result<StepDecision, DecodeError> {
    let ctx = model.encode(input)?;
    let (goal, distribution) = match (policy.mode, given_goal) {
        (GoalMode::Fixed(g), _) => (g, None),
        (GoalMode::PredictedTilt { alpha }, _) => {
            let d = goal_distribution(model, vocab, &ctx)?;
            (tilt_select(&d.probs, alpha), Some(d))
        }
        (GoalMode::OptimalManual, Some(g)) => (g, None),
        (GoalMode::OptimalManual, None) => panic!("optimal-GC decoding needs the running goal"),
    };
    let prefix = vec![vocab.goal_mark(), vocab.goal_token(goal), vocab.delim(), vocab.action_mark()];
    let action = match policy.action_decoding {
        ActionDecoding::Greedy => greedy_action(model, vocab, &ctx, prefix)?,
        ActionDecoding::Constrained => constrained_action(model, vocab, &ctx, &prefix, candidates)?,
    };
    Ok(StepDecision {
        goal,
        action,
        distribution,
    })
}

fn greedy_action(model: &Seq2Seq, vocab: &Vocabulary, ctx: &EncodedContext, mut prefix: Vec<u32>) -> Result<String, DecodeError> {
    let cap = model.config.max_output_tokens;
    let closed = loop {
        if prefix.len() + 1 > cap {
            break false;
        }
        let next = model.next_distribution(ctx, &prefix)?;
        let tok = argmax(&next);
        prefix.push(tok);
        if tok == vocab.delim() {
            break true;
        }
    };
    if !closed {
        return Err(DecodeError::NoDelimiter(cap));
    }
    let text = vocab.decode(&prefix);
    parse_output(&text).action.ok_or(DecodeError::Parse(text))
}

fn constrained_action(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    ctx: &EncodedContext,
    prefix: &[u32],
    candidates: &[String],
) -> Result<String, DecodeError> {
    let mut best: Option<(f64, &String)> = None;
    for c in candidates {
        let mut cont = vocab.encode(c);
        cont.push(vocab.delim());
        let lp = model.sequence_log_prob(ctx, prefix, &cont)?;
        if best.map_or(true, |(b, _)| lp > b) {
            best = Some((lp, c));
        }
    }
    best.map(|(_, c)| c.clone()).ok_or_else(|| DecodeError::Parse("no candidate actions".into()))
}

/// Index of the largest entry; the first one on ties.
fn argmax(p: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best as u32
}
