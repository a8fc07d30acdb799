//! Preference-pair mining for DPO.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Completion, Policy, Question};
use crate::reward::{aggregate, score_trace, RewardWeights, Scorer};
use crate::scale::{argmax_first, argmin_first, expand_step, sample_full, SampleBudget, ScaleConfig, ScaleError};
use crate::trace::{Step, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Aggregate of step and answer scores.
    StepAnswerPrm,
    /// Aggregate with step weight 0.
    AnswerOnlyPrm,
    /// Final-answer correctness only.
    Outcome,
    /// One pair per step along a greedy best-step chain (experimental).
    PerStepWise,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::StepAnswerPrm => "step_answer_prm",
            Regime::AnswerOnlyPrm => "answer_only_prm",
            Regime::Outcome => "outcome",
            Regime::PerStepWise => "per_step_wise",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.replace('-', "_").as_str() {
            "step_answer_prm" | "step_answer" | "prm" => Regime::StepAnswerPrm,
            "answer_only_prm" | "answer_only" => Regime::AnswerOnlyPrm,
            "outcome" => Regime::Outcome,
            "per_step_wise" | "stepwise" => Regime::PerStepWise,
            other => return Err(format!("unknown regime '{other}'")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub paths_per_question: usize,
    /// Minimum score gap `t` between chosen and rejected (PRM regimes).
    pub margin_threshold: f64,
    pub weights: RewardWeights,
    pub regime: Regime,
    pub round: u32,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            paths_per_question: 16,
            margin_threshold: 0.2,
            weights: RewardWeights::default(),
            regime: Regime::StepAnswerPrm,
            round: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum MineError {
    #[error("invalid mining config: {0}")]
    Config(String),
    #[error(transparent)]
    Scale(#[from] ScaleError),
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MineError> {
        if self.paths_per_question < 2 && self.regime != Regime::PerStepWise {
            return Err(MineError::Config("paths_per_question must be at least 2".into()));
        }
        if self.paths_per_question == 0 {
            return Err(MineError::Config("paths_per_question must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.margin_threshold) {
            return Err(MineError::Config("margin threshold must lie in [0, 1]".into()));
        }
        self.weights
            .validate()
            .map_err(|e| MineError::Config(e.to_string()))
    }
}

/// The steps and answer of a trace, as stored in pair files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceBody {
    pub steps: Vec<Step>,
    pub answer: String,
}

impl From<Trace> for TraceBody {
    fn from(t: Trace) -> Self {
        Self {
            steps: t.steps,
            answer: t.answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question_id: String,
    pub chosen: TraceBody,
    pub rejected: TraceBody,
    pub chosen_score: f64,
    pub rejected_score: f64,
    pub regime: Regime,
    pub round: u32,
    /// Step index of a per-step pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub experimental: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MiningResult {
    /// Sorted by question id.
    pub pairs: Vec<PreferencePair>,
    /// Questions for which no pair cleared the constraint.
    pub skipped: usize,
    pub budget: SampleBudget,
}

/// Samples paths per question, scores them under the configured regime and
/// keeps the (best, worst) pair when it clears the margin. For the outcome
/// regime the pair must join a correct and an incorrect answer instead.
pub fn mine_pairs<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    questions: &[Question],
    cfg: &MiningConfig,
    scale: &ScaleConfig,
) -> Result<MiningResult, MineError> {
    cfg.validate()?;
    if cfg.regime == Regime::PerStepWise {
        return mine_stepwise_pairs(policy, scorer, questions, cfg, scale);
    }
    let per_question = questions
        .par_iter()
        .map(|q| mine_question(policy, scorer, q, cfg, scale))
        .collect::<Result<Vec<_>, ScaleError>>()?;
    let mut result = MiningResult::default();
    for (pair, budget) in per_question {
        result.budget += budget;
        match pair {
            Some(p) => result.pairs.push(p),
            None => result.skipped += 1,
        }
    }
    result.pairs.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(result)
}

fn mine_question<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    q: &Question,
    cfg: &MiningConfig,
    scale: &ScaleConfig,
) -> Result<(Option<PreferencePair>, SampleBudget), ScaleError> {
    let (mut traces, mut budget) = sample_full(policy, q, cfg.paths_per_question, scale)?;
    let scores: Vec<f64> = match cfg.regime {
        Regime::Outcome => {
            let gold = q
                .golden
                .as_deref()
                .ok_or_else(|| ScaleError::MissingGolden(q.id.clone()))?;
            traces
                .iter()
                .map(|t| f64::from(u8::from(scale.matcher.matches(&t.answer, gold))))
                .collect()
        }
        _ => {
            let w = if cfg.regime == Regime::AnswerOnlyPrm {
                RewardWeights::answer_only()
            } else {
                cfg.weights
            };
            budget.scorer_calls += traces.len();
            traces
                .iter()
                .map(|t| Ok(aggregate(&score_trace(scorer, q, t)?, w)))
                .collect::<Result<_, crate::reward::ScoreError>>()?
        }
    };
    let (Some(hi), Some(lo)) = (argmax_first(&scores), argmin_first(&scores)) else {
        return Ok((None, budget));
    };
    let admitted = match cfg.regime {
        Regime::Outcome => scores[hi] == 1.0 && scores[lo] == 0.0,
        _ => scores[hi] - scores[lo] > cfg.margin_threshold,
    };
    if !admitted {
        return Ok((None, budget));
    }
    let rejected = traces[lo].clone();
    let chosen = traces.swap_remove(hi);
    Ok((
        Some(PreferencePair {
            question_id: q.id.clone(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            chosen_score: scores[hi],
            rejected_score: scores[lo],
            regime: cfg.regime,
            round: cfg.round,
            step: None,
            experimental: false,
        }),
        budget,
    ))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepwiseResult {
    pub pairs: Vec<PreferencePair>,
    /// The best-step chain followed for each question, in question order.
    pub chains: Vec<Trace>,
    pub budget: SampleBudget,
}

/// Builds one pair per step: at each step the best and worst sampled
/// candidates (ranked exactly as in step-level beam search) form a pair,
/// and expansion continues from the best one. No margin is applied.
pub fn mine_stepwise_chains<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    questions: &[Question],
    cfg: &MiningConfig,
    scale: &ScaleConfig,
) -> Result<StepwiseResult, MineError> {
    cfg.validate()?;
    let per_question = questions
        .par_iter()
        .map(|q| stepwise_question(policy, scorer, q, cfg, scale))
        .collect::<Result<Vec<_>, ScaleError>>()?;
    let mut result = StepwiseResult::default();
    for (pairs, chain, budget) in per_question {
        result.pairs.extend(pairs);
        result.chains.push(chain);
        result.budget += budget;
    }
    result.pairs.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(result)
}

/// [`mine_stepwise_chains`] reduced to the pairs.
pub fn mine_stepwise_pairs<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    questions: &[Question],
    cfg: &MiningConfig,
    scale: &ScaleConfig,
) -> Result<MiningResult, MineError> {
    let r = mine_stepwise_chains(policy, scorer, questions, cfg, scale)?;
    let with_pairs: std::collections::BTreeSet<&str> = r.pairs.iter().map(|p| p.question_id.as_str()).collect();
    Ok(MiningResult {
        skipped: questions.len() - with_pairs.len(),
        pairs: r.pairs,
        budget: r.budget,
    })
}

type StepwiseOutput = (Vec<PreferencePair>, Trace, SampleBudget);

fn stepwise_question<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    q: &Question,
    cfg: &MiningConfig,
    scale: &ScaleConfig,
) -> Result<StepwiseOutput, ScaleError> {
    let mut steps: Vec<Step> = Vec::new();
    let mut pairs = Vec::new();
    let mut budget = SampleBudget::default();
    loop {
        if steps.len() >= scale.sampling.max_steps {
            return Err(ScaleError::Truncated {
                partial: Trace::new(&q.id, steps, ""),
                max_steps: scale.sampling.max_steps,
            });
        }
        let (cands, spent) = expand_step(policy, scorer, q, &steps, cfg.paths_per_question, 0, scale)?;
        budget += spent;
        let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
        let best = argmax_first(&scores).expect("at least one candidate");
        let worst = argmin_first(&scores).expect("at least one candidate");
        let as_trace = |c: &Completion| c.clone().into_trace(&q.id);
        if best != worst {
            pairs.push(PreferencePair {
                question_id: q.id.clone(),
                chosen: as_trace(&cands[best].completion).into(),
                rejected: as_trace(&cands[worst].completion).into(),
                chosen_score: scores[best],
                rejected_score: scores[worst],
                regime: Regime::PerStepWise,
                round: cfg.round,
                step: Some(steps.len() + 1),
                experimental: true,
            });
        }
        match &cands[best].completion {
            Completion::Full(t) => {
                let mut t = t.clone();
                t.question_id = q.id.clone();
                return Ok((pairs, t, budget));
            }
            Completion::Partial(s) => steps = s.clone(),
        }
    }
}

/// Target number of pairs per iterative round.
pub const PAIRS_PER_ROUND: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub round: u32,
    /// Policy that samples the paths mined in this round.
    pub policy: String,
    pub reference: String,
    pub target_pairs: usize,
    pub pairs_file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundManifest {
    pub reference: String,
    pub rounds: Vec<RoundEntry>,
}

/// Iterative DPO schedule: round `r` samples with the policy trained in
/// round `r - 1` (the SFT model for round 1) while the reference stays the
/// SFT model throughout.
pub fn plan_iterative_rounds(round_count: u32, reference: &str) -> RoundManifest {
    let rounds = (1..=round_count)
        .map(|r| RoundEntry {
            round: r,
            policy: if r == 1 {
                reference.to_string()
            } else {
                format!("dpo-round-{}", r - 1)
            },
            reference: reference.to_string(),
            target_pairs: PAIRS_PER_ROUND,
            pairs_file: format!("pairs-round-{r}.jsonl"),
        })
        .collect();
    RoundManifest {
        reference: reference.to_string(),
        rounds,
    }
}
