//! JSON bodies of the policy, scorer and judge HTTP protocol.
//!
//! Every body carries `protocol_version`; the matching JSON schemas live in
//! the repository's `schemas/` directory.

use serde::{Deserialize, Serialize};

use crate::annotate::JudgeLabel;
use crate::policy::{Continuation, PolicyRequest, SamplingParams};
use crate::reward::StepwiseScores;
use crate::trace::{Step, Trace};

pub const PROTOCOL_VERSION: &str = "1";

pub const SAMPLE_PATH: &str = "/v1/sample";
pub const SCORE_PATH: &str = "/v1/score";
pub const JUDGE_PATH: &str = "/v1/judge";
pub const HEALTH_PATH: &str = "/healthz";

fn version() -> String {
    PROTOCOL_VERSION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub protocol_version: String,
    pub question_id: String,
    pub question: String,
    #[serde(default)]
    pub prefix: String,
    #[serde(default)]
    pub stop_at_step: bool,
    #[serde(default)]
    pub ordinal: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
    pub params: SamplingParams,
}

impl SampleRequest {
    pub fn new(req: &PolicyRequest, params: &SamplingParams) -> Self {
        Self {
            protocol_version: version(),
            question_id: req.question_id.clone(),
            question: req.question.clone(),
            prefix: req.prefix.clone(),
            stop_at_step: req.stop_at_step,
            ordinal: req.ordinal,
            images: req.images.clone(),
            params: params.clone(),
        }
    }

    pub fn policy_request(&self) -> PolicyRequest {
        PolicyRequest {
            question_id: self.question_id.clone(),
            question: self.question.clone(),
            prefix: self.prefix.clone(),
            stop_at_step: self.stop_at_step,
            ordinal: self.ordinal,
            images: self.images.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub protocol_version: String,
    pub continuations: Vec<Continuation>,
}

impl SampleResponse {
    pub fn new(continuations: Vec<Continuation>) -> Self {
        Self {
            protocol_version: version(),
            continuations,
        }
    }
}

/// A trace as sent to a scorer or judge. `answer` is null for a partial
/// trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTrace {
    pub steps: Vec<Step>,
    pub answer: Option<String>,
}

impl From<&Trace> for WireTrace {
    fn from(t: &Trace) -> Self {
        Self {
            steps: t.steps.clone(),
            answer: Some(t.answer.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub protocol_version: String,
    pub question_id: String,
    pub question: String,
    pub trace: WireTrace,
    pub partial: bool,
}

impl ScoreRequest {
    pub fn full(question_id: &str, question: &str, trace: &Trace) -> Self {
        Self {
            protocol_version: version(),
            question_id: question_id.to_string(),
            question: question.to_string(),
            trace: trace.into(),
            partial: false,
        }
    }

    pub fn partial(question_id: &str, question: &str, steps: &[Step]) -> Self {
        Self {
            protocol_version: version(),
            question_id: question_id.to_string(),
            question: question.to_string(),
            trace: WireTrace {
                steps: steps.to_vec(),
                answer: None,
            },
            partial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub protocol_version: String,
    pub step_scores: Vec<f64>,
    pub answer_score: Option<f64>,
}

impl ScoreResponse {
    pub fn full(s: &StepwiseScores) -> Self {
        Self {
            protocol_version: version(),
            step_scores: s.step_scores.clone(),
            answer_score: Some(s.answer_score),
        }
    }

    pub fn partial(step_scores: Vec<f64>) -> Self {
        Self {
            protocol_version: version(),
            step_scores,
            answer_score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub protocol_version: String,
    pub question_id: String,
    pub question: String,
    pub trace: WireTrace,
}

impl JudgeRequest {
    pub fn new(question_id: &str, question: &str, trace: &Trace) -> Self {
        Self {
            protocol_version: version(),
            question_id: question_id.to_string(),
            question: question.to_string(),
            trace: trace.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub protocol_version: String,
    pub labels: Vec<JudgeLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Machine-readable code such as `schema` or `unavailable`.
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub protocol_version: String,
    pub error: ErrorBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub protocol_version: String,
    pub version: String,
}

/// Rejects bodies from another protocol revision.
pub fn check_version(v: &str) -> Result<(), String> {
    if v == PROTOCOL_VERSION {
        Ok(())
    } else {
        Err(format!("protocol version {v:?}, expected {PROTOCOL_VERSION:?}"))
    }
}
