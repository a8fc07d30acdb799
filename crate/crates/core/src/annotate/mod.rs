//! Step-level correctness labels: Monte-Carlo rollouts, judge-label
//! fusion, and PRM training rows.

mod matcher;

pub use matcher::{AnswerMatcher, NUMERIC_TOL};

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{read_jsonl, write_jsonl_record, JsonlError};
use crate::policy::{
    sample_validated, Completion, Policy, PolicyError, PolicyRequest, Question, RetryPolicy, SamplingParams, SimState,
};
use crate::trace::{prefix_at, render_trace, Trace, TraceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JudgeLabel {
    Good,
    Neutral,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mc,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub question_id: String,
    pub trace: Trace,
    /// Soft correctness per step (MC) or 0/1 (judge).
    pub step_values: Vec<f64>,
    pub answer_correct: bool,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollouts_per_step: Option<usize>,
    /// Well-formed rollouts behind each step value; below
    /// `rollouts_per_step` when malformed output was dropped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub valid_rollouts: Vec<usize>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub malformed_rollouts: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl ProcessRecord {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.step_values.len() != self.trace.steps.len() {
            return Err(AnnotateError::LengthMismatch {
                steps: self.trace.steps.len(),
                values: self.step_values.len(),
            });
        }
        if let Some(v) = self.step_values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AnnotateError::ValueOutOfRange(*v));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("judge labels must not be empty")]
    EmptyLabels,
    #[error("{labels} judge labels for {steps} steps")]
    LabelCount { steps: usize, labels: usize },
    #[error("{values} step values for {steps} steps")]
    LengthMismatch { steps: usize, values: usize },
    #[error("step value {0} is outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("rollouts per step must be at least 1")]
    NoRollouts,
    #[error("invalid trace: {0}")]
    Trace(#[from] TraceError),
    #[error("rollout for step {step} failed: {source}")]
    Policy {
        step: usize,
        #[source]
        source: PolicyError,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("judge failed: {0}")]
    Judge(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub rollouts: usize,
    pub sampling: SamplingParams,
    pub matcher: AnswerMatcher,
    pub retry: RetryPolicy,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            rollouts: 16,
            sampling: SamplingParams::default(),
            matcher: AnswerMatcher::default(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Labels each step by the share of rollouts from its prefix that reach
/// `golden`. Steps are annotated in parallel; the simulator's derived
/// streams make the values independent of scheduling.
pub fn mc_annotate<P: Policy + ?Sized>(
    policy: &P,
    question: &Question,
    trace: &Trace,
    golden: &str,
    cfg: &McConfig,
) -> Result<ProcessRecord, AnnotateError> {
    trace.validate()?;
    if cfg.rollouts == 0 {
        return Err(AnnotateError::NoRollouts);
    }
    let params = cfg.sampling.with_n(cfg.rollouts);
    let per_step: Vec<(f64, usize, usize)> = (1..=trace.steps.len())
        .into_par_iter()
        .map(|k| {
            let prefix = prefix_at(trace, k)?.serialized_text;
            let req = PolicyRequest::new(question, prefix);
            let batch = sample_validated(policy, &req, &params, cfg.retry)
                .map_err(|source| AnnotateError::Policy { step: k, source })?;
            let hits = batch
                .paths
                .iter()
                .filter(|p| match &p.completion {
                    Completion::Full(t) => cfg.matcher.matches(&t.answer, golden),
                    Completion::Partial(_) => false,
                })
                .count();
            let valid = batch.paths.len();
            Ok((hits as f64 / valid as f64, valid, batch.malformed))
        })
        .collect::<Result<_, AnnotateError>>()?;
    Ok(ProcessRecord {
        question_id: question.id.clone(),
        trace: trace.clone(),
        step_values: per_step.iter().map(|s| s.0).collect(),
        answer_correct: cfg.matcher.matches(&trace.answer, golden),
        method: Method::Mc,
        rollouts_per_step: Some(cfg.rollouts),
        valid_rollouts: per_step.iter().map(|s| s.1).collect(),
        malformed_rollouts: per_step.iter().map(|s| s.2).sum(),
    })
}

/// Binary step correctness from judge labels. With a correct answer only
/// Bad steps are wrong; with a wrong answer only Good steps are right.
pub fn fuse_judge_labels(labels: &[JudgeLabel], answer_correct: bool) -> Result<Vec<bool>, AnnotateError> {
    if labels.is_empty() {
        return Err(AnnotateError::EmptyLabels);
    }
    Ok(labels
        .iter()
        .map(|l| match l {
            JudgeLabel::Good => true,
            JudgeLabel::Neutral => answer_correct,
            JudgeLabel::Bad => false,
        })
        .collect())
}

pub fn judge_record(trace: &Trace, labels: &[JudgeLabel], answer_correct: bool) -> Result<ProcessRecord, AnnotateError> {
    if labels.len() != trace.steps.len() {
        return Err(AnnotateError::LabelCount {
            steps: trace.steps.len(),
            labels: labels.len(),
        });
    }
    let fused = fuse_judge_labels(labels, answer_correct)?;
    Ok(ProcessRecord {
        question_id: trace.question_id.clone(),
        trace: trace.clone(),
        step_values: fused.into_iter().map(|c| if c { 1.0 } else { 0.0 }).collect(),
        answer_correct,
        method: Method::Judge,
        rollouts_per_step: None,
        valid_rollouts: Vec::new(),
        malformed_rollouts: 0,
    })
}

/// Labels every step of a trace.
pub trait Judge: Send + Sync {
    fn judge(&self, question: &Question, trace: &Trace) -> Result<Vec<JudgeLabel>, AnnotateError>;
}

impl<J: Judge + ?Sized> Judge for &J {
    fn judge(&self, question: &Question, trace: &Trace) -> Result<Vec<JudgeLabel>, AnnotateError> {
        (**self).judge(question, trace)
    }
}

impl<J: Judge + ?Sized> Judge for Box<J> {
    fn judge(&self, question: &Question, trace: &Trace) -> Result<Vec<JudgeLabel>, AnnotateError> {
        (**self).judge(question, trace)
    }
}

/// Reads the hidden path state of simulator steps: Good on the correct
/// path, Bad off it. Never says Neutral.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimJudge;

impl Judge for SimJudge {
    fn judge(&self, _: &Question, trace: &Trace) -> Result<Vec<JudgeLabel>, AnnotateError> {
        trace
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| match SimState::decode(s) {
                Some(st) if st.on_good_path => Ok(JudgeLabel::Good),
                Some(_) => Ok(JudgeLabel::Bad),
                None => Err(AnnotateError::Judge(format!("step {} has no simulator state", i + 1))),
            })
            .collect()
    }
}

/// One PRM training example: a serialized partial solution and its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmRow {
    pub question_id: String,
    /// 1-based step index, or null for the answer row.
    pub step: Option<usize>,
    pub prefix_text: String,
    pub label: u8,
    pub soft_value: f64,
}

pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// Values at or above the threshold become label 1.
pub fn binarize(value: f64, threshold: f64) -> u8 {
    u8::from(value >= threshold)
}

/// Rows for one record: one per step, then one for the answer, whose
/// prefix is the whole trace.
pub fn prm_rows(record: &ProcessRecord, threshold: f64) -> Result<Vec<PrmRow>, AnnotateError> {
    record.validate()?;
    let mut rows = Vec::with_capacity(record.step_values.len() + 1);
    for (i, &v) in record.step_values.iter().enumerate() {
        rows.push(PrmRow {
            question_id: record.question_id.clone(),
            step: Some(i + 1),
            prefix_text: prefix_at(&record.trace, i + 1)?.serialized_text,
            label: binarize(v, threshold),
            soft_value: v,
        });
    }
    let a = if record.answer_correct { 1.0 } else { 0.0 };
    rows.push(PrmRow {
        question_id: record.question_id.clone(),
        step: None,
        prefix_text: render_trace(&record.trace),
        label: binarize(a, threshold),
        soft_value: a,
    });
    Ok(rows)
}

/// Streams records into PRM rows; returns the number of rows written.
pub fn emit_prm_dataset<W: Write>(
    records: impl IntoIterator<Item = ProcessRecord>,
    threshold: f64,
    mut out: W,
) -> Result<usize, AnnotateError> {
    let mut n = 0;
    for r in records {
        for row in prm_rows(&r, threshold)? {
            write_jsonl_record(&mut out, &row)?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn read_prm_dataset<R: BufRead>(reader: R) -> Result<Vec<PrmRow>, AnnotateError> {
    Ok(read_jsonl(reader).collect::<Result<_, _>>()?)
}
