//! Trace generation behind a sampling interface.
//!
//! A [`Policy`] turns a question plus an optional serialized prefix into
//! continuations. Callers normally go through [`sample_validated`], which
//! checks every continuation against the trace grammar and retries the
//! malformed ones.

mod sim;

pub use sim::{
    exact_success_prob, golden_answer, sim_policy, SimPolicy, SimState, SimTreeSpec,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{parse_prefix, parse_trace, ParseMode, PrefixEnd, Step, Trace};

/// Sampling controls forwarded to real backends. The simulator ignores
/// `temperature` and `top_p`; its randomness is fully described by its spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub n: usize,
    pub max_steps: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            n: 16,
            max_steps: 32,
        }
    }
}

impl SamplingParams {
    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidRequest(m.to_string()));
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        Ok(())
    }
}

/// A question with an optional reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<String>,
    /// Opaque image references; never decoded here.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            golden: None,
            images: Vec::new(),
        }
    }

    pub fn with_golden(mut self, golden: impl Into<String>) -> Self {
        self.golden = Some(golden.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub question_id: String,
    pub question: String,
    /// Serialized prefix; empty means generate from scratch.
    #[serde(default)]
    pub prefix: String,
    /// Stop after the next complete step (or after the answer if the
    /// policy ends the reasoning instead).
    #[serde(default)]
    pub stop_at_step: bool,
    /// Draw index for repeated requests with identical content.
    #[serde(default)]
    pub ordinal: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

impl PolicyRequest {
    pub fn new(question: &Question, prefix: impl Into<String>) -> Self {
        Self {
            question_id: question.id.clone(),
            question: question.text.clone(),
            prefix: prefix.into(),
            stop_at_step: false,
            ordinal: 0,
            images: question.images.clone(),
        }
    }

    pub fn single_step(mut self) -> Self {
        self.stop_at_step = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub text: String,
    pub steps_generated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("policy backend unreachable: {0}")]
    Unreachable(String),
    #[error("invalid policy request: {0}")]
    InvalidRequest(String),
    #[error("invalid simulator spec: {0}")]
    InvalidSpec(String),
    #[error("all {malformed} continuations were malformed after {attempts} attempts")]
    Malformed { malformed: usize, attempts: u32 },
}

/// Anything that can extend a reasoning prefix.
pub trait Policy: Send + Sync {
    /// Returns exactly `params.n` continuations of `req.prefix`.
    fn sample(
        &self,
        req: &PolicyRequest,
        params: &SamplingParams,
    ) -> Result<Vec<Continuation>, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn sample(&self, req: &PolicyRequest, params: &SamplingParams) -> Result<Vec<Continuation>, PolicyError> {
        (**self).sample(req, params)
    }
}

impl<P: Policy + ?Sized> Policy for std::sync::Arc<P> {
    fn sample(&self, req: &PolicyRequest, params: &SamplingParams) -> Result<Vec<Continuation>, PolicyError> {
        (**self).sample(req, params)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn sample(&self, req: &PolicyRequest, params: &SamplingParams) -> Result<Vec<Continuation>, PolicyError> {
        (**self).sample(req, params)
    }
}

/// What a continuation amounts to once glued onto its prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completion {
    /// The reasoning ended and an answer was produced.
    Full(Trace),
    /// Single-step mode: the steps so far, ending before a delimiter.
    Partial(Vec<Step>),
}

impl Completion {
    pub fn steps(&self) -> &[Step] {
        match self {
            Completion::Full(t) => &t.steps,
            Completion::Partial(s) => s,
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Completion::Full(_))
    }

    /// The completion as a trace; partial completions get an empty answer.
    pub fn into_trace(self, question_id: &str) -> Trace {
        match self {
            Completion::Full(mut t) => {
                t.question_id = question_id.to_string();
                t
            }
            Completion::Partial(steps) => Trace::new(question_id, steps, ""),
        }
    }
}

/// Checks `prefix + text` against the grammar. In single-step mode a
/// result ending in a delimiter with exactly one new step is also valid.
pub fn classify_continuation(
    prefix: &str,
    text: &str,
    prefix_steps: usize,
    stop_at_step: bool,
) -> Option<Completion> {
    let combined = format!("{prefix}{text}");
    if let Ok(parsed) = parse_trace(&combined, ParseMode::Strict) {
        if stop_at_step && parsed.trace.steps.len() > prefix_steps + 1 {
            return None;
        }
        return Some(Completion::Full(parsed.trace));
    }
    if stop_at_step {
        if let Ok(p) = parse_prefix(&combined) {
            if p.end == PrefixEnd::AfterProceed && p.steps.len() == prefix_steps + 1 {
                return Some(Completion::Partial(p.steps));
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra requests issued to replace malformed continuations.
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub continuation: Continuation,
    pub completion: Completion,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleBatch {
    pub paths: Vec<SampledPath>,
    /// Malformed continuations seen (and discarded) across all attempts.
    pub malformed: usize,
    pub policy_calls: usize,
    pub continuations_requested: usize,
}

impl SampleBatch {
    pub fn steps_generated(&self) -> usize {
        self.paths.iter().map(|p| p.continuation.steps_generated).sum()
    }
}

/// Samples `params.n` continuations and keeps the well-formed ones.
/// Malformed continuations are replaced by fresh draws (with a bumped
/// ordinal) up to `retry.max_retries` times; any remaining shortfall is
/// reported through [`SampleBatch::malformed`]. Fails only if nothing
/// well-formed came back.
pub fn sample_validated<P: Policy + ?Sized>(
    policy: &P,
    req: &PolicyRequest,
    params: &SamplingParams,
    retry: RetryPolicy,
) -> Result<SampleBatch, PolicyError> {
    params.validate()?;
    let prefix_steps = parse_prefix(&req.prefix)
        .map_err(|e| PolicyError::InvalidRequest(format!("bad prefix: {e}")))?
        .steps
        .len();
    let mut batch = SampleBatch::default();
    let mut attempt = 0u32;
    let mut want = params.n;
    loop {
        let mut r = req.clone();
        r.ordinal = req.ordinal + attempt as u64;
        let got = policy.sample(&r, &params.with_n(want))?;
        batch.policy_calls += 1;
        batch.continuations_requested += want;
        for c in got.into_iter().take(want) {
            match classify_continuation(&req.prefix, &c.text, prefix_steps, req.stop_at_step) {
                Some(completion) => batch.paths.push(SampledPath {
                    continuation: c,
                    completion,
                }),
                None => batch.malformed += 1,
            }
        }
        want = params.n.saturating_sub(batch.paths.len());
        if want == 0 || attempt >= retry.max_retries {
            break;
        }
        attempt += 1;
    }
    if batch.paths.is_empty() {
        return Err(PolicyError::Malformed {
            malformed: batch.malformed,
            attempts: attempt + 1,
        });
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{prefix_at, render_trace};

    #[test]
    fn default_sampling_params() {
        let p = SamplingParams::default();
        assert_eq!(p.temperature, 1.0);
        assert_eq!(p.top_p, 0.95);
        assert_eq!(p.n, 16);
        assert!(p.validate().is_ok());
        assert!(SamplingParams { top_p: 0.0, ..p.clone() }.validate().is_err());
        assert!(p.with_n(0).validate().is_err());
    }

    fn two_step() -> Trace {
        Trace::new(
            "q",
            vec![Step::new("a", "b", "c"), Step::new("d", "e", "f")],
            "x",
        )
    }

    #[test]
    fn classify_full_and_partial() {
        let t = two_step();
        let full = render_trace(&t);
        let p1 = prefix_at(&t, 1).unwrap().serialized_text;
        let rest = &full[p1.len()..];
        assert!(matches!(
            classify_continuation(&p1, rest, 1, false),
            Some(Completion::Full(_))
        ));
        let p2 = prefix_at(&t, 2).unwrap().serialized_text;
        // one new step and a delimiter is a valid single-step continuation
        let step2 = &p2[p1.len()..];
        let partial = format!("{step2}<|reasoning_proceed|>");
        match classify_continuation(&p1, &partial, 1, true) {
            Some(Completion::Partial(steps)) => assert_eq!(steps, t.steps),
            other => panic!("unexpected {other:?}"),
        }
        // ...but not outside single-step mode
        assert!(classify_continuation(&p1, &partial, 1, false).is_none());
        // too many steps for single-step mode
        assert!(classify_continuation("", &full, 0, true).is_none());
        assert!(classify_continuation("", "garbage", 0, false).is_none());
    }

    struct Flaky {
        bad_first: usize,
    }

    impl Policy for Flaky {
        fn sample(&self, req: &PolicyRequest, params: &SamplingParams) -> Result<Vec<Continuation>, PolicyError> {
            let good = render_trace(&Trace::new("", vec![Step::new("n", "t", "r")], "1"));
            Ok((0..params.n)
                .map(|i| Continuation {
                    text: if req.ordinal == 0 && i < self.bad_first {
                        "oops".into()
                    } else {
                        good.clone()
                    },
                    steps_generated: 1,
                    log_prob: None,
                })
                .collect())
        }
    }

    #[test]
    fn retries_replace_malformed() {
        let req = PolicyRequest::new(&Question::new("q", ""), "");
        let params = SamplingParams::default().with_n(4);
        let batch = sample_validated(&Flaky { bad_first: 3 }, &req, &params, RetryPolicy::default()).unwrap();
        assert_eq!(batch.paths.len(), 4);
        assert_eq!(batch.malformed, 3);
        assert_eq!(batch.policy_calls, 2);
        assert_eq!(batch.continuations_requested, 7);

        let none = sample_validated(&Flaky { bad_first: 3 }, &req, &params, RetryPolicy { max_retries: 0 }).unwrap();
        assert_eq!(none.paths.len(), 1);
        assert_eq!(none.malformed, 3);

        let err = sample_validated(&Flaky { bad_first: 4 }, &req, &params, RetryPolicy { max_retries: 0 }).unwrap_err();
        assert_eq!(err, PolicyError::Malformed { malformed: 4, attempts: 1 });
    }
}
