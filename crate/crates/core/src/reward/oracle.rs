//! Scorer that reads the simulator's hidden state.

use serde::{Deserialize, Serialize};

use super::{ScoreError, Scorer, StepwiseScores};
use crate::policy::{exact_success_prob, golden_answer, PolicyError, Question, SimState, SimTreeSpec};
use crate::rng::{truncated_normal, StreamKey};
use crate::trace::{render_steps, render_trace, Step, Trace};

/// What a step's noiseless score is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepTruth {
    /// 1 on a correct path, 0 otherwise.
    #[default]
    OnPath,
    /// Chance that a rollout from the step reaches the golden answer.
    SuccessProb,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub spec: SimTreeSpec,
    #[serde(default)]
    pub noise_step: f64,
    #[serde(default)]
    pub noise_answer: f64,
    #[serde(default)]
    pub step_truth: StepTruth,
    /// Weight of the realized answer correctness in the answer score's
    /// noiseless value. The remainder comes from the leaf's answer
    /// accuracy, i.e. how sound the reasoning that produced it was.
    #[serde(default = "one")]
    pub answer_evidence: f64,
    #[serde(default)]
    pub seed: u64,
}

impl OracleConfig {
    pub fn new(spec: SimTreeSpec, noise_sigma: f64) -> Self {
        Self {
            seed: spec.seed,
            spec,
            noise_step: noise_sigma,
            noise_answer: noise_sigma,
            step_truth: StepTruth::OnPath,
            answer_evidence: 1.0,
        }
    }
}

/// Test double for a process reward model: exact truth from the state tags
/// plus truncated Gaussian noise. Noise for a step depends only on the
/// steps up to it, so a prefix scores the same alone or inside a full trace.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    cfg: OracleConfig,
}

impl OracleScorer {
    pub fn new(cfg: OracleConfig) -> Result<Self, PolicyError> {
        cfg.spec.validate()?;
        for (name, v) in [("noise_step", cfg.noise_step), ("noise_answer", cfg.noise_answer)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PolicyError::InvalidSpec(format!("{name} must be a finite non-negative sigma")));
            }
        }
        if !(0.0..=1.0).contains(&cfg.answer_evidence) {
            return Err(PolicyError::InvalidSpec("answer_evidence must lie in [0, 1]".into()));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    fn states(steps: &[Step]) -> Result<Vec<SimState>, ScoreError> {
        steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                SimState::decode(s).ok_or_else(|| ScoreError::NotSimulated(format!("step {} has no state tag", i + 1)))
            })
            .collect()
    }

    pub fn step_truth(&self, state: SimState) -> f64 {
        match self.cfg.step_truth {
            StepTruth::OnPath => f64::from(u8::from(state.on_good_path)),
            StepTruth::SuccessProb => exact_success_prob(&self.cfg.spec, state),
        }
    }

    pub fn answer_truth(&self, question: &Question, trace: &Trace) -> Result<f64, ScoreError> {
        let last = *Self::states(&trace.steps)?
            .last()
            .ok_or_else(|| ScoreError::NotSimulated("trace has no steps".into()))?;
        let golden = question.golden.clone().unwrap_or_else(|| golden_answer(&question.id));
        let realized = f64::from(u8::from(trace.answer.trim() == golden.trim()));
        let leaf = exact_success_prob(&self.cfg.spec, SimState::new(last.on_good_path, 0));
        let lambda = self.cfg.answer_evidence;
        Ok(if lambda == 1.0 {
            realized
        } else {
            lambda * realized + (1.0 - lambda) * leaf
        })
    }

    fn noisy_steps(&self, question: &Question, steps: &[Step]) -> Result<Vec<f64>, ScoreError> {
        let states = Self::states(steps)?;
        Ok(states
            .iter()
            .enumerate()
            .map(|(k, &st)| {
                let truth = self.step_truth(st);
                let mut rng = StreamKey::new(self.cfg.seed, "oracle-step")
                    .str(&question.id)
                    .str(&render_steps(&steps[..=k]))
                    .rng();
                truncated_normal(&mut rng, truth, self.cfg.noise_step)
            })
            .collect())
    }
}

impl Scorer for OracleScorer {
    fn score(&self, question: &Question, trace: &Trace) -> Result<StepwiseScores, ScoreError> {
        let step_scores = self.noisy_steps(question, &trace.steps)?;
        let truth = self.answer_truth(question, trace)?;
        let mut rng = StreamKey::new(self.cfg.seed, "oracle-answer")
            .str(&question.id)
            .str(&render_trace(trace))
            .rng();
        Ok(StepwiseScores {
            step_scores,
            answer_score: truncated_normal(&mut rng, truth, self.cfg.noise_answer),
        })
    }

    fn score_steps(&self, question: &Question, steps: &[Step]) -> Result<Vec<f64>, ScoreError> {
        self.noisy_steps(question, steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::sim_policy;

    fn spec() -> SimTreeSpec {
        SimTreeSpec {
            depth: 3,
            p_good_given_good: 0.6,
            seed: 5,
            ..SimTreeSpec::default()
        }
    }

    #[test]
    fn noiseless_oracle_reads_tags() {
        let sim = sim_policy(spec()).unwrap();
        let q = Question::new("q-1", "");
        let good = sim.trace_along("q-1", &[true, true, true], golden_answer("q-1"));
        let oracle = OracleScorer::new(OracleConfig::new(spec(), 0.0)).unwrap();
        let s = oracle.score(&q, &good).unwrap();
        assert_eq!(s.step_scores, vec![1.0; 3]);
        assert_eq!(s.answer_score, 1.0);
        let bad = sim.trace_along("q-1", &[true, false, false], "0");
        let s = oracle.score(&q, &bad).unwrap();
        assert_eq!(s.step_scores, vec![1.0, 0.0, 0.0]);
        assert_eq!(s.answer_score, 0.0);
    }

    #[test]
    fn prefix_scores_agree_with_full_scores() {
        let sim = sim_policy(spec()).unwrap();
        let q = Question::new("q-2", "");
        let t = sim.trace_along("q-2", &[true, false, false], "7");
        let oracle = OracleScorer::new(OracleConfig::new(spec(), 0.3)).unwrap();
        let full = oracle.score(&q, &t).unwrap();
        let part = oracle.score_steps(&q, &t.steps[..2]).unwrap();
        assert_eq!(full.step_scores[..2], part[..]);
    }

    #[test]
    fn success_prob_truth() {
        let mut cfg = OracleConfig::new(spec(), 0.0);
        cfg.step_truth = StepTruth::SuccessProb;
        let oracle = OracleScorer::new(cfg).unwrap();
        let sim = sim_policy(spec()).unwrap();
        let t = sim.trace_along("q", &[true, true, true], "1");
        let s = oracle.score(&Question::new("q", ""), &t).unwrap();
        assert!((s.step_scores[0] - 0.36).abs() < 1e-12);
        assert!((s.step_scores[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn untagged_trace_is_rejected() {
        let oracle = OracleScorer::new(OracleConfig::new(spec(), 0.0)).unwrap();
        let t = Trace::new("q", vec![Step::new("a", "b", "c")], "x");
        assert!(matches!(
            oracle.score(&Question::new("q", ""), &t),
            Err(ScoreError::NotSimulated(_))
        ));
    }
}
