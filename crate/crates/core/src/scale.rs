//! Inference-time scaling strategies with sample-budget accounting.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::AnswerMatcher;
use crate::policy::{
    sample_validated, Completion, Policy, PolicyError, PolicyRequest, Question, RetryPolicy, SampleBatch,
    SamplingParams,
};
use crate::reward::{aggregate, mean, score_steps, score_trace, RewardWeights, ScoreError, Scorer};
use crate::trace::{render_steps, SpecialToken, Step, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleBudget {
    pub policy_calls: usize,
    pub continuations_requested: usize,
    pub steps_generated: usize,
    pub scorer_calls: usize,
}

impl SampleBudget {
    pub fn from_batch(batch: &SampleBatch) -> Self {
        Self {
            policy_calls: batch.policy_calls,
            continuations_requested: batch.continuations_requested,
            steps_generated: batch.steps_generated(),
            scorer_calls: 0,
        }
    }
}

impl Add for SampleBudget {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            policy_calls: self.policy_calls + o.policy_calls,
            continuations_requested: self.continuations_requested + o.continuations_requested,
            steps_generated: self.steps_generated + o.steps_generated,
            scorer_calls: self.scorer_calls + o.scorer_calls,
        }
    }
}

impl AddAssign for SampleBudget {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for SampleBudget {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOutcome {
    pub chosen: Trace,
    pub answer: String,
    pub budget: SampleBudget,
    pub candidates_considered: usize,
}

impl StrategyOutcome {
    fn new(chosen: Trace, budget: SampleBudget, candidates_considered: usize) -> Self {
        Self {
            answer: chosen.answer.clone(),
            chosen,
            budget,
            candidates_considered,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("no answer after {max_steps} steps")]
    Truncated { partial: Trace, max_steps: usize },
    #[error("question {0} has no golden answer")]
    MissingGolden(String),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleConfig {
    pub sampling: SamplingParams,
    pub retry: RetryPolicy,
    pub weights: RewardWeights,
    pub matcher: AnswerMatcher,
    pub beam_width: usize,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingParams::default(),
            retry: RetryPolicy::default(),
            weights: RewardWeights::default(),
            matcher: AnswerMatcher::default(),
            beam_width: 1,
        }
    }
}

/// Index of the largest value; the earliest wins ties.
pub fn argmax_first(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in xs.iter().enumerate() {
        if best.is_none_or(|b| *x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Index of the smallest value; the earliest wins ties.
pub fn argmin_first(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in xs.iter().enumerate() {
        if best.is_none_or(|b| *x < xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Index of a member of the largest matcher-equivalence group. Ties go to
/// the group whose first member was sampled earliest, and that member is
/// returned.
pub fn majority_vote(answers: &[&str], matcher: &AnswerMatcher) -> Option<usize> {
    let mut reps: Vec<(usize, usize)> = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        match reps.iter_mut().find(|(r, _)| matcher.matches(answers[*r], a)) {
            Some(group) => group.1 += 1,
            None => reps.push((i, 1)),
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (rep, count) in reps {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((rep, count));
        }
    }
    best.map(|(rep, _)| rep)
}

/// Samples `n` complete traces from scratch.
pub fn sample_full<P: Policy + ?Sized>(
    policy: &P,
    question: &Question,
    n: usize,
    cfg: &ScaleConfig,
) -> Result<(Vec<Trace>, SampleBudget), ScaleError> {
    if n == 0 {
        return Err(ScaleError::InvalidArgument("N must be at least 1".into()));
    }
    let req = PolicyRequest::new(question, "");
    let batch = sample_validated(policy, &req, &cfg.sampling.with_n(n), cfg.retry)?;
    let budget = SampleBudget::from_batch(&batch);
    let traces = batch
        .paths
        .into_iter()
        .map(|p| p.completion.into_trace(&question.id))
        .collect();
    Ok((traces, budget))
}

fn golden(question: &Question) -> Result<&str, ScaleError> {
    question
        .golden
        .as_deref()
        .ok_or_else(|| ScaleError::MissingGolden(question.id.clone()))
}

/// Whether any of `n` samples is correct.
pub fn pass_at_n<P: Policy + ?Sized>(
    policy: &P,
    question: &Question,
    n: usize,
    cfg: &ScaleConfig,
) -> Result<(bool, SampleBudget), ScaleError> {
    let gold = golden(question)?;
    let (traces, budget) = sample_full(policy, question, n, cfg)?;
    Ok((traces.iter().any(|t| cfg.matcher.matches(&t.answer, gold)), budget))
}

/// One sample, taken as is.
pub fn single_sample<P: Policy + ?Sized>(
    policy: &P,
    question: &Question,
    cfg: &ScaleConfig,
) -> Result<StrategyOutcome, ScaleError> {
    let (mut traces, budget) = sample_full(policy, question, 1, cfg)?;
    Ok(StrategyOutcome::new(traces.swap_remove(0), budget, 1))
}

pub fn self_consistency<P: Policy + ?Sized>(
    policy: &P,
    question: &Question,
    n: usize,
    cfg: &ScaleConfig,
) -> Result<StrategyOutcome, ScaleError> {
    let (mut traces, budget) = sample_full(policy, question, n, cfg)?;
    let answers: Vec<&str> = traces.iter().map(|t| t.answer.as_str()).collect();
    let i = majority_vote(&answers, &cfg.matcher).expect("at least one sample");
    let considered = traces.len();
    Ok(StrategyOutcome::new(traces.swap_remove(i), budget, considered))
}

pub fn best_of_n<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    question: &Question,
    n: usize,
    cfg: &ScaleConfig,
) -> Result<StrategyOutcome, ScaleError> {
    let (mut traces, mut budget) = sample_full(policy, question, n, cfg)?;
    let scores = traces
        .iter()
        .map(|t| Ok(aggregate(&score_trace(scorer, question, t)?, cfg.weights)))
        .collect::<Result<Vec<f64>, ScoreError>>()?;
    budget.scorer_calls += traces.len();
    let i = argmax_first(&scores).expect("at least one sample");
    let considered = traces.len();
    Ok(StrategyOutcome::new(traces.swap_remove(i), budget, considered))
}

/// Score used to rank step candidates during search: the aggregate for a
/// finished trace, the mean step score for an unfinished one.
pub fn candidate_score<S: Scorer + ?Sized>(
    scorer: &S,
    question: &Question,
    completion: &Completion,
    weights: RewardWeights,
) -> Result<f64, ScoreError> {
    match completion {
        Completion::Full(t) => Ok(aggregate(&score_trace(scorer, question, t)?, weights)),
        Completion::Partial(steps) => Ok(mean(&score_steps(scorer, question, steps)?)),
    }
}

/// Serialized prefix that continues after `steps`.
pub fn open_prefix(steps: &[Step]) -> String {
    if steps.is_empty() {
        return String::new();
    }
    let mut s = String::from(SpecialToken::ReasoningStart.surface());
    s.push_str(&render_steps(steps));
    s.push_str(SpecialToken::Proceed.surface());
    s
}

/// A scored single-step candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCandidate {
    pub score: f64,
    pub completion: Completion,
}

/// Samples `n` single-step continuations after `steps` and scores them.
pub fn expand_step<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    question: &Question,
    steps: &[Step],
    n: usize,
    ordinal: u64,
    cfg: &ScaleConfig,
) -> Result<(Vec<StepCandidate>, SampleBudget), ScaleError> {
    let mut req = PolicyRequest::new(question, open_prefix(steps)).single_step();
    req.ordinal = ordinal;
    let batch = sample_validated(policy, &req, &cfg.sampling.with_n(n), cfg.retry)?;
    let mut budget = SampleBudget::from_batch(&batch);
    let cands = batch
        .paths
        .into_iter()
        .map(|p| {
            let score = candidate_score(scorer, question, &p.completion, cfg.weights)?;
            Ok(StepCandidate {
                score,
                completion: match p.completion {
                    Completion::Full(mut t) => {
                        t.question_id = question.id.clone();
                        Completion::Full(t)
                    }
                    partial => partial,
                },
            })
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;
    budget.scorer_calls += cands.len();
    Ok((cands, budget))
}

/// Step-level beam search. Each round spreads `n` single-step samples over
/// the live beams, ranks all candidates and keeps the best `beam_width`.
/// The search ends once the top candidate has produced an answer; the best
/// finished trace seen so far is returned.
pub fn step_beam_search<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    question: &Question,
    n: usize,
    cfg: &ScaleConfig,
) -> Result<StrategyOutcome, ScaleError> {
    let b = cfg.beam_width;
    if n == 0 || b == 0 || b > n {
        return Err(ScaleError::InvalidArgument(format!(
            "need 1 <= beam width ({b}) <= N ({n})"
        )));
    }
    let mut beams: Vec<Vec<Step>> = vec![Vec::new()];
    let mut finished: Vec<(f64, Trace)> = Vec::new();
    let mut budget = SampleBudget::default();
    let mut considered = 0;
    loop {
        if beams[0].len() >= cfg.sampling.max_steps {
            return Err(ScaleError::Truncated {
                partial: Trace::new(&question.id, beams.swap_remove(0), ""),
                max_steps: cfg.sampling.max_steps,
            });
        }
        let mut cands = Vec::new();
        let live = beams.len();
        for (j, steps) in beams.iter().enumerate() {
            let n_j = n / live + usize::from(j < n % live);
            if n_j == 0 {
                continue;
            }
            let (c, spent) = expand_step(policy, scorer, question, steps, n_j, j as u64, cfg)?;
            budget += spent;
            cands.extend(c);
        }
        considered += cands.len();
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|x, y| cands[*y].score.total_cmp(&cands[*x].score));
        order.truncate(b);

        let top_done = cands[order[0]].completion.is_full();
        let mut next = Vec::new();
        for &i in &order {
            match &cands[i].completion {
                Completion::Full(t) => finished.push((cands[i].score, t.clone())),
                Completion::Partial(steps) => next.push(steps.clone()),
            }
        }
        if top_done || next.is_empty() {
            let scores: Vec<f64> = finished.iter().map(|f| f.0).collect();
            let i = argmax_first(&scores).expect("a finished candidate");
            return Ok(StrategyOutcome::new(finished.swap_remove(i).1, budget, considered));
        }
        beams = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    Single,
    PassAtN,
    SelfConsistency,
    BestOfN,
    BeamSearch,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Single,
        Strategy::PassAtN,
        Strategy::SelfConsistency,
        Strategy::BestOfN,
        Strategy::BeamSearch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::PassAtN => "pass@n",
            Strategy::SelfConsistency => "self-consistency",
            Strategy::BestOfN => "best-of-n",
            Strategy::BeamSearch => "beam-search",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "single" => Strategy::Single,
            "pass@n" | "pass" => Strategy::PassAtN,
            "self-consistency" | "sc" => Strategy::SelfConsistency,
            "best-of-n" | "bon" => Strategy::BestOfN,
            "beam-search" | "bs" => Strategy::BeamSearch,
            other => return Err(format!("unknown strategy '{other}'")),
        })
    }
}

/// Correctness and cost of one strategy on one question.
pub fn run_strategy<P: Policy + ?Sized, S: Scorer + ?Sized>(
    strategy: Strategy,
    policy: &P,
    scorer: &S,
    question: &Question,
    n: usize,
    cfg: &ScaleConfig,
) -> Result<(bool, SampleBudget), ScaleError> {
    let gold = golden(question)?;
    let outcome = match strategy {
        Strategy::PassAtN => return pass_at_n(policy, question, n, cfg),
        Strategy::Single => single_sample(policy, question, cfg)?,
        Strategy::SelfConsistency => self_consistency(policy, question, n, cfg)?,
        Strategy::BestOfN => best_of_n(policy, scorer, question, n, cfg)?,
        Strategy::BeamSearch => step_beam_search(policy, scorer, question, n, cfg)?,
    };
    Ok((cfg.matcher.matches(&outcome.answer, gold), outcome.budget))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub strategy: Strategy,
    pub n: usize,
    pub accuracy: f64,
    pub budget: SampleBudget,
    pub wall_ms: u64,
    /// Per-question correctness, in question order.
    pub outcomes: Vec<bool>,
}

impl SuiteRow {
    pub fn correct(&self) -> usize {
        self.outcomes.iter().filter(|c| **c).count()
    }
}

/// Evaluates every strategy at every grid point over all questions. The
/// single-sample baseline ignores N and is reported once, at N = 1.
/// Wall-clock time is only measured when `timing` is set, so that reports
/// stay byte-reproducible by default.
pub fn run_strategy_suite<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    questions: &[Question],
    strategies: &[Strategy],
    n_grid: &[usize],
    cfg: &ScaleConfig,
    timing: bool,
) -> Result<Vec<SuiteRow>, ScaleError> {
    if questions.is_empty() {
        return Err(ScaleError::InvalidArgument("no questions".into()));
    }
    let mut rows = Vec::new();
    for &strategy in strategies {
        let grid: Vec<usize> = if strategy == Strategy::Single { vec![1] } else { n_grid.to_vec() };
        for n in grid {
            let start = Instant::now();
            let results = questions
                .par_iter()
                .map(|q| run_strategy(strategy, policy, scorer, q, n, cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let wall_ms = if timing { start.elapsed().as_millis() as u64 } else { 0 };
            let outcomes: Vec<bool> = results.iter().map(|r| r.0).collect();
            let correct = outcomes.iter().filter(|c| **c).count();
            rows.push(SuiteRow {
                strategy,
                n,
                accuracy: correct as f64 / questions.len() as f64,
                budget: results.iter().map(|r| r.1).sum(),
                wall_ms,
                outcomes,
            });
        }
    }
    Ok(rows)
}

/// Flat row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCsvRow {
    pub strategy: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub accuracy: f64,
    pub policy_calls: usize,
    pub steps_generated: usize,
    pub scorer_calls: usize,
    pub wall_ms: u64,
}

impl From<&SuiteRow> for SuiteCsvRow {
    fn from(r: &SuiteRow) -> Self {
        Self {
            strategy: r.strategy.name().to_string(),
            n: r.n,
            accuracy: r.accuracy,
            policy_calls: r.budget.policy_calls,
            steps_generated: r.budget.steps_generated,
            scorer_calls: r.budget.scorer_calls,
            wall_ms: r.wall_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_argmin_prefer_earliest() {
        assert_eq!(argmax_first(&[0.1, 0.9, 0.9]), Some(1));
        assert_eq!(argmin_first(&[0.5, 0.1, 0.1]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn votes() {
        let m = AnswerMatcher::default();
        assert_eq!(majority_vote(&["A", "A", "B"], &m), Some(0));
        assert_eq!(majority_vote(&["B", "A", "A"], &m), Some(1));
        assert_eq!(majority_vote(&["A", "B"], &m), Some(0));
        assert_eq!(majority_vote(&["B", "A"], &m), Some(0));
        assert_eq!(majority_vote(&["3", "x", "3.0"], &m), Some(0));
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
    }
}
