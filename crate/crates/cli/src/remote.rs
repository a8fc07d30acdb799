//! HTTP clients for model servers speaking the `/v1/*` JSON protocol.

use std::time::Duration;

use cos_core::annotate::{AnnotateError, Judge, JudgeLabel};
use cos_core::policy::{Continuation, Policy, PolicyError, PolicyRequest, SamplingParams};
use cos_core::reward::{ScoreError, Scorer, StepwiseScores};
use cos_core::trace::{Step, Trace};
use cos_core::wire::{
    check_version, ErrorResponse, HealthResponse, JudgeRequest, JudgeResponse, SampleRequest, SampleResponse,
    ScoreRequest, ScoreResponse, HEALTH_PATH, JUDGE_PATH, SAMPLE_PATH, SCORE_PATH,
};
use cos_core::Question;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("{url}: {message}")]
    Transport { url: String, message: String },
    /// The server answered with an error status.
    #[error("{url}: HTTP {status} ({code}): {message}")]
    Status {
        url: String,
        status: u16,
        code: String,
        message: String,
    },
    #[error("{url}: undecodable response: {message}")]
    Decode { url: String, message: String },
}

impl RemoteError {
    /// True for 4xx answers, i.e. the request itself was rejected.
    pub fn is_client_error(&self) -> bool {
        matches!(self, RemoteError::Status { status, .. } if (400..500).contains(status))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    agent: ureq::Agent,
    base_url: String,
}

impl RemoteClient {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            base_url: base_url.trim_end_matches('/').to_string(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    fn decode<T: DeserializeOwned>(url: &str, resp: ureq::Response) -> Result<T, RemoteError> {
        let decode = |message: String| RemoteError::Decode {
            url: url.to_string(),
            message,
        };
        let v: serde_json::Value = resp.into_json().map_err(|e| decode(e.to_string()))?;
        let version = v.get("protocol_version").and_then(|x| x.as_str()).unwrap_or("");
        check_version(version).map_err(decode)?;
        serde_json::from_value(v).map_err(|e| decode(e.to_string()))
    }

    fn failure(url: &str, err: ureq::Error) -> RemoteError {
        match err {
            ureq::Error::Status(status, resp) => {
                let (code, message) = match resp.into_json::<ErrorResponse>() {
                    Ok(e) => (e.error.code, e.error.message),
                    Err(_) => ("unknown".to_string(), String::new()),
                };
                RemoteError::Status {
                    url: url.to_string(),
                    status,
                    code,
                    message,
                }
            }
            ureq::Error::Transport(t) => RemoteError::Transport {
                url: url.to_string(),
                message: t.to_string(),
            },
        }
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, RemoteError> {
        let url = self.url(path);
        match self.agent.post(&url).send_json(body) {
            Ok(resp) => Self::decode(&url, resp),
            Err(e) => Err(Self::failure(&url, e)),
        }
    }

    pub fn health(&self) -> Result<HealthResponse, RemoteError> {
        let url = self.url(HEALTH_PATH);
        match self.agent.get(&url).call() {
            Ok(resp) => Self::decode(&url, resp),
            Err(e) => Err(Self::failure(&url, e)),
        }
    }
}

/// A policy served over HTTP.
#[derive(Debug, Clone)]
pub struct RemotePolicy(pub RemoteClient);

impl Policy for RemotePolicy {
    fn sample(&self, req: &PolicyRequest, params: &SamplingParams) -> Result<Vec<Continuation>, PolicyError> {
        let body = SampleRequest::new(req, params);
        let resp: SampleResponse = self.0.post(SAMPLE_PATH, &body).map_err(|e| {
            if e.is_client_error() {
                PolicyError::InvalidRequest(e.to_string())
            } else {
                PolicyError::Unreachable(e.to_string())
            }
        })?;
        if resp.continuations.len() != params.n {
            return Err(PolicyError::Unreachable(format!(
                "server returned {} continuations, asked for {}",
                resp.continuations.len(),
                params.n
            )));
        }
        Ok(resp.continuations)
    }
}

/// A step scorer served over HTTP.
#[derive(Debug, Clone)]
pub struct RemoteScorer(pub RemoteClient);

impl RemoteScorer {
    fn call(&self, body: &ScoreRequest) -> Result<ScoreResponse, ScoreError> {
        self.0
            .post(SCORE_PATH, body)
            .map_err(|e| ScoreError::Unreachable(e.to_string()))
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, question: &Question, trace: &Trace) -> Result<StepwiseScores, ScoreError> {
        let resp = self.call(&ScoreRequest::full(&question.id, &question.text, trace))?;
        let answer_score = resp
            .answer_score
            .ok_or_else(|| ScoreError::Unreachable("server gave no answer score for a full trace".into()))?;
        Ok(StepwiseScores {
            step_scores: resp.step_scores,
            answer_score,
        })
    }

    fn score_steps(&self, question: &Question, steps: &[Step]) -> Result<Vec<f64>, ScoreError> {
        Ok(self.call(&ScoreRequest::partial(&question.id, &question.text, steps))?.step_scores)
    }
}

/// A step judge served over HTTP.
#[derive(Debug, Clone)]
pub struct RemoteJudge(pub RemoteClient);

impl Judge for RemoteJudge {
    fn judge(&self, question: &Question, trace: &Trace) -> Result<Vec<JudgeLabel>, AnnotateError> {
        let resp: JudgeResponse = self
            .0
            .post(JUDGE_PATH, &JudgeRequest::new(&question.id, &question.text, trace))
            .map_err(|e| AnnotateError::Judge(e.to_string()))?;
        Ok(resp.labels)
    }
}
