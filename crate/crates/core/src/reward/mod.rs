//! Trace scoring, score aggregation and the training losses.

mod oracle;

pub use oracle::{OracleConfig, OracleScorer, StepTruth};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Question;
use crate::trace::{Step, Trace, TraceError};

/// Per-step scores plus the answer score, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseScores {
    pub step_scores: Vec<f64>,
    pub answer_score: f64,
}

impl StepwiseScores {
    pub fn mean_step_score(&self) -> f64 {
        mean(&self.step_scores)
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// Share of the mean step score in the final score.
    pub step_weight: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { step_weight: 0.2 }
    }
}

impl RewardWeights {
    pub fn new(step_weight: f64) -> Result<Self, ScoreError> {
        let w = Self { step_weight };
        w.validate()?;
        Ok(w)
    }

    pub fn answer_only() -> Self {
        Self { step_weight: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(0.0..=1.0).contains(&self.step_weight) {
            return Err(ScoreError::InvalidWeight(self.step_weight));
        }
        Ok(())
    }
}

/// `w * mean(step_scores) + (1 - w) * answer_score`.
pub fn aggregate(scores: &StepwiseScores, weights: RewardWeights) -> f64 {
    let w = weights.step_weight;
    // The endpoints return the component itself so no rounding creeps in.
    if w == 0.0 {
        return scores.answer_score;
    }
    if w == 1.0 {
        return scores.mean_step_score();
    }
    w * scores.mean_step_score() + (1.0 - w) * scores.answer_score
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("scorer backend unreachable: {0}")]
    Unreachable(String),
    #[error("score {value} at position {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("scorer returned {got} step scores for {expected} steps")]
    WrongLength { expected: usize, got: usize },
    #[error("trace cannot be scored: {0}")]
    InvalidTrace(#[from] TraceError),
    #[error("trace was not produced by the simulator: {0}")]
    NotSimulated(String),
    #[error("step weight {0} is outside [0, 1]")]
    InvalidWeight(f64),
}

/// Something that judges reasoning steps, such as a process reward model.
pub trait Scorer: Send + Sync {
    /// Scores a complete trace.
    fn score(&self, question: &Question, trace: &Trace) -> Result<StepwiseScores, ScoreError>;

    /// Scores the steps of an unfinished trace. No answer exists yet, so
    /// only step scores come back.
    fn score_steps(&self, question: &Question, steps: &[Step]) -> Result<Vec<f64>, ScoreError>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, q: &Question, t: &Trace) -> Result<StepwiseScores, ScoreError> {
        (**self).score(q, t)
    }
    fn score_steps(&self, q: &Question, s: &[Step]) -> Result<Vec<f64>, ScoreError> {
        (**self).score_steps(q, s)
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn score(&self, q: &Question, t: &Trace) -> Result<StepwiseScores, ScoreError> {
        (**self).score(q, t)
    }
    fn score_steps(&self, q: &Question, s: &[Step]) -> Result<Vec<f64>, ScoreError> {
        (**self).score_steps(q, s)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn score(&self, q: &Question, t: &Trace) -> Result<StepwiseScores, ScoreError> {
        (**self).score(q, t)
    }
    fn score_steps(&self, q: &Question, s: &[Step]) -> Result<Vec<f64>, ScoreError> {
        (**self).score_steps(q, s)
    }
}

fn check_scores(scores: &[f64], expected: usize) -> Result<(), ScoreError> {
    if scores.len() != expected {
        return Err(ScoreError::WrongLength {
            expected,
            got: scores.len(),
        });
    }
    for (index, &value) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(ScoreError::OutOfRange { index, value });
        }
    }
    Ok(())
}

/// Scores a trace and checks the reply: one score per step, everything in
/// `[0, 1]`. Out-of-range values are reported, never clamped.
pub fn score_trace<S: Scorer + ?Sized>(
    scorer: &S,
    question: &Question,
    trace: &Trace,
) -> Result<StepwiseScores, ScoreError> {
    trace.validate()?;
    let s = scorer.score(question, trace)?;
    check_scores(&s.step_scores, trace.steps.len())?;
    if !(0.0..=1.0).contains(&s.answer_score) {
        return Err(ScoreError::OutOfRange {
            index: trace.steps.len(),
            value: s.answer_score,
        });
    }
    Ok(s)
}

/// Partial-trace counterpart of [`score_trace`].
pub fn score_steps<S: Scorer + ?Sized>(
    scorer: &S,
    question: &Question,
    steps: &[Step],
) -> Result<Vec<f64>, ScoreError> {
    if steps.is_empty() {
        return Err(TraceError::NoSteps.into());
    }
    let s = scorer.score_steps(question, steps)?;
    check_scores(&s, steps.len())?;
    Ok(s)
}

/// Returns the same score for everything.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _: &Question, trace: &Trace) -> Result<StepwiseScores, ScoreError> {
        Ok(StepwiseScores {
            step_scores: vec![self.0; trace.steps.len()],
            answer_score: self.0,
        })
    }

    fn score_steps(&self, _: &Question, steps: &[Step]) -> Result<Vec<f64>, ScoreError> {
        Ok(vec![self.0; steps.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LossError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("loss over an empty batch")]
    Empty,
}

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

/// Mean binary cross-entropy of step predictions against 0/1 labels.
pub fn prm_bce_loss(predictions: &[f64], labels: &[bool]) -> Result<f64, LossError> {
    if predictions.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(LossError::Empty);
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Sequence log-probabilities of a preference pair under the policy being
/// trained and under the frozen reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbQuad {
    pub logp_policy_chosen: f64,
    pub logp_policy_rejected: f64,
    pub logp_ref_chosen: f64,
    pub logp_ref_rejected: f64,
}

impl LogProbQuad {
    /// Reference-relative preference margin.
    pub fn margin(&self) -> f64 {
        (self.logp_policy_chosen - self.logp_ref_chosen)
            - (self.logp_policy_rejected - self.logp_ref_rejected)
    }
}

pub const DEFAULT_DPO_BETA: f64 = 0.1;

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigmoid(beta * margin)`.
pub fn dpo_objective(q: &LogProbQuad, beta: f64) -> f64 {
    softplus(-beta * q.margin())
}

/// Partial derivatives of [`dpo_objective`] with respect to each input.
pub fn dpo_gradient(q: &LogProbQuad, beta: f64) -> LogProbQuad {
    let g = -beta * sigmoid(-beta * q.margin());
    LogProbQuad {
        logp_policy_chosen: g,
        logp_policy_rejected: -g,
        logp_ref_chosen: -g,
        logp_ref_rejected: g,
    }
}
