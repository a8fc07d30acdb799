//! Run configuration: a flat JSON document, overridden by `COS_SEED` and
//! then by command-line flags.

use std::path::{Path, PathBuf};

use cos_core::annotate::AnswerMatcher;
use cos_core::policy::{golden_answer, RetryPolicy, SamplingParams, SimTreeSpec};
use cos_core::prefmine::{MiningConfig, Regime};
use cos_core::reward::{OracleConfig, RewardWeights, StepTruth};
use cos_core::scale::ScaleConfig;
use cos_core::Question;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEED_ENV: &str = "COS_SEED";

/// A problem with how the tool was invoked rather than with the data.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Sim,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub backend: BackendKind,
    /// Required by, and only allowed with, the remote backend.
    pub base_url: Option<String>,
    pub timeout_secs: u64,
    /// Simulator tree; the default tree when absent.
    pub sim: Option<SimTreeSpec>,
    pub questions: Option<PathBuf>,
    /// Synthetic simulator questions generated when no file is given.
    pub num_questions: usize,
    pub sampling: SamplingParams,
    pub max_retries: u32,
    pub step_weight: f64,
    pub matcher: String,
    pub beam_width: usize,
    pub noise_step: f64,
    pub noise_answer: f64,
    pub answer_evidence: f64,
    pub step_truth: StepTruth,
    pub rollouts: usize,
    pub binarize_threshold: f64,
    pub regime: Regime,
    pub margin_threshold: f64,
    pub paths_per_question: usize,
    pub round: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mining = MiningConfig::default();
        Self {
            seed: None,
            backend: BackendKind::Sim,
            base_url: None,
            timeout_secs: 60,
            sim: None,
            questions: None,
            num_questions: 100,
            sampling: SamplingParams::default(),
            max_retries: RetryPolicy::default().max_retries,
            step_weight: RewardWeights::default().step_weight,
            matcher: AnswerMatcher::default().to_string(),
            beam_width: 1,
            noise_step: 0.1,
            noise_answer: 0.1,
            answer_evidence: 1.0,
            step_truth: StepTruth::default(),
            rollouts: 16,
            binarize_threshold: cos_core::annotate::DEFAULT_BINARIZE_THRESHOLD,
            regime: mining.regime,
            margin_threshold: mining.margin_threshold,
            paths_per_question: mining.paths_per_question,
            round: mining.round,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    /// Applies the seed precedence: flag, then `COS_SEED`, then the file,
    /// then the simulator spec's own seed, then 0. The result is written
    /// back into both `seed` and the simulator spec.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> anyhow::Result<u64> {
        let env = match env {
            Some(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            None => None,
        };
        let seed = flag
            .or(env)
            .or(self.seed)
            .or(self.sim.as_ref().map(|s| s.seed))
            .unwrap_or(0);
        self.seed = Some(seed);
        if let Some(s) = &mut self.sim {
            s.seed = seed;
        }
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Backend exclusivity, numeric ranges, and input paths.
    pub fn validate(&self) -> anyhow::Result<()> {
        match (self.backend, &self.base_url) {
            (BackendKind::Remote, None) => return Err(usage("the remote backend needs base_url")),
            (BackendKind::Sim, Some(_)) => return Err(usage("base_url is only valid with the remote backend")),
            _ => {}
        }
        if let Some(p) = &self.questions {
            if !p.is_file() {
                return Err(usage(format!("questions file {} does not exist", p.display())));
            }
        } else if self.backend == BackendKind::Remote {
            return Err(usage("the remote backend needs a questions file"));
        }
        self.matcher_()?;
        self.weights()?;
        self.mining()?;
        for (name, v) in [("noise_step", self.noise_step), ("noise_answer", self.noise_answer)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(usage(format!("{name} must be a non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.answer_evidence) {
            return Err(usage("answer_evidence must lie in [0, 1]"));
        }
        if self.beam_width == 0 {
            return Err(usage("beam_width must be at least 1"));
        }
        self.sampling.validate().map_err(|e| usage(e.to_string()))?;
        if let Some(s) = &self.sim {
            s.validate().map_err(|e| usage(e.to_string()))?;
        }
        Ok(())
    }

    fn matcher_(&self) -> anyhow::Result<AnswerMatcher> {
        self.matcher.parse().map_err(|e| usage(format!("matcher {:?}: {e}", self.matcher)))
    }

    pub fn matcher(&self) -> AnswerMatcher {
        self.matcher_().expect("validated matcher")
    }

    pub fn weights(&self) -> anyhow::Result<RewardWeights> {
        RewardWeights::new(self.step_weight).map_err(|e| usage(e.to_string()))
    }

    pub fn sim_spec(&self) -> SimTreeSpec {
        self.sim.clone().unwrap_or_else(|| SimTreeSpec {
            seed: self.seed(),
            ..SimTreeSpec::default()
        })
    }

    pub fn oracle(&self) -> OracleConfig {
        OracleConfig {
            spec: self.sim_spec(),
            noise_step: self.noise_step,
            noise_answer: self.noise_answer,
            step_truth: self.step_truth,
            answer_evidence: self.answer_evidence,
            seed: self.seed(),
        }
    }

    pub fn scale(&self) -> anyhow::Result<ScaleConfig> {
        Ok(ScaleConfig {
            sampling: self.sampling.clone(),
            retry: RetryPolicy {
                max_retries: self.max_retries,
            },
            weights: self.weights()?,
            matcher: self.matcher_()?,
            beam_width: self.beam_width,
        })
    }

    pub fn mining(&self) -> anyhow::Result<MiningConfig> {
        let cfg = MiningConfig {
            paths_per_question: self.paths_per_question,
            margin_threshold: self.margin_threshold,
            weights: self.weights()?,
            regime: self.regime,
            round: self.round,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Questions from the configured file, or synthetic simulator
    /// questions. Simulator golden answers fill any that are missing.
    pub fn load_questions(&self) -> anyhow::Result<Vec<Question>> {
        let mut qs: Vec<Question> = match &self.questions {
            Some(p) => crate::io::read_all(p)?,
            None => (0..self.num_questions)
                .map(|i| Question::new(format!("q-{i:05}"), ""))
                .collect(),
        };
        if self.backend == BackendKind::Sim {
            for q in &mut qs {
                if q.golden.is_none() {
                    q.golden = Some(golden_answer(&q.id));
                }
            }
        }
        Ok(qs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        let mut c = RunConfig {
            seed: Some(3),
            ..RunConfig::default()
        };
        assert_eq!(c.clone().resolve_seed(Some(1), Some("2")).unwrap(), 1);
        assert_eq!(c.clone().resolve_seed(None, Some("2")).unwrap(), 2);
        assert_eq!(c.clone().resolve_seed(None, None).unwrap(), 3);
        c.seed = None;
        c.sim = Some(SimTreeSpec {
            seed: 4,
            ..SimTreeSpec::default()
        });
        assert_eq!(c.clone().resolve_seed(None, None).unwrap(), 4);
        c.sim = None;
        assert_eq!(c.clone().resolve_seed(None, None).unwrap(), 0);
        assert!(c.resolve_seed(None, Some("x")).is_err());
    }

    #[test]
    fn one_backend_only() {
        let mut c = RunConfig {
            base_url: Some("http://localhost:1".into()),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        c.backend = BackendKind::Remote;
        // still missing questions
        assert!(c.validate().is_err());
        c.base_url = None;
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seeed": 1}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"seed": 1, "regime": "outcome"}"#).unwrap();
        assert_eq!(c.regime, Regime::Outcome);
        assert_eq!(c.rollouts, 16);
    }
}
