//! Experiment harness: weight sweeps, scaling curves, PRM accuracy, step
//! length statistics and reproducible reports.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::annotate::ProcessRecord;
use crate::policy::{Policy, Question};
use crate::reward::{aggregate, score_trace, RewardWeights, ScoreError, Scorer, StepwiseScores};
use crate::scale::{argmax_first, sample_full, SampleBudget, ScaleConfig, ScaleError, SuiteRow};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval at 95% for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0).min(p), (centre + half).min(1.0).max(p))
}

/// One point of an accuracy curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tag: String,
    pub x: f64,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub questions: usize,
    pub policy_calls: usize,
    pub continuations_requested: usize,
    pub steps_generated: usize,
    pub scorer_calls: usize,
}

impl CurvePoint {
    pub fn new(tag: impl Into<String>, x: f64, correct: usize, questions: usize, budget: SampleBudget) -> Self {
        let (ci_low, ci_high) = wilson_interval(correct, questions);
        Self {
            tag: tag.into(),
            x,
            accuracy: if questions == 0 { 0.0 } else { correct as f64 / questions as f64 },
            ci_low,
            ci_high,
            questions,
            policy_calls: budget.policy_calls,
            continuations_requested: budget.continuations_requested,
            steps_generated: budget.steps_generated,
            scorer_calls: budget.scorer_calls,
        }
    }
}

/// Scaling curve points from a strategy suite run.
pub fn scaling_curve(rows: &[SuiteRow]) -> Vec<CurvePoint> {
    rows.iter()
        .map(|r| CurvePoint::new(r.strategy.name(), r.n as f64, r.correct(), r.outcomes.len(), r.budget))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<CurvePoint>,
    /// Chosen trace per weight (outer) and question (inner).
    pub chosen: Vec<Vec<Trace>>,
}

pub fn linspace_grid(step: f64) -> Vec<f64> {
    let k = (1.0 / step).round() as usize;
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

/// Best-of-N accuracy across step weights. Candidates are sampled and
/// scored once per question; each weight only re-ranks them.
pub fn weight_sweep<P: Policy + ?Sized, S: Scorer + ?Sized>(
    policy: &P,
    scorer: &S,
    questions: &[Question],
    grid: &[f64],
    n: usize,
    cfg: &ScaleConfig,
) -> Result<SweepResult, EvalError> {
    if questions.is_empty() || grid.is_empty() {
        return Err(EvalError::Empty("weight sweep needs questions and a grid".into()));
    }
    let weights = grid
        .iter()
        .map(|&w| RewardWeights::new(w))
        .collect::<Result<Vec<_>, _>>()?;
    type Scored = (Vec<Trace>, Vec<StepwiseScores>, SampleBudget, String);
    let scored = questions
        .par_iter()
        .map(|q| -> Result<Scored, EvalError> {
            let gold = q
                .golden
                .clone()
                .ok_or_else(|| ScaleError::MissingGolden(q.id.clone()))?;
            let (traces, mut budget) = sample_full(policy, q, n, cfg)?;
            let scores = traces
                .iter()
                .map(|t| score_trace(scorer, q, t))
                .collect::<Result<Vec<_>, _>>()?;
            budget.scorer_calls += traces.len();
            Ok((traces, scores, budget, gold))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let budget: SampleBudget = scored.iter().map(|s| s.2).sum();

    let mut points = Vec::with_capacity(grid.len());
    let mut chosen = Vec::with_capacity(grid.len());
    for (&w, weights) in grid.iter().zip(weights) {
        let mut correct = 0;
        let mut picks = Vec::with_capacity(scored.len());
        for (traces, scores, _, gold) in &scored {
            let agg: Vec<f64> = scores.iter().map(|s| aggregate(s, weights)).collect();
            let t = &traces[argmax_first(&agg).expect("candidates")];
            if cfg.matcher.matches(&t.answer, gold) {
                correct += 1;
            }
            picks.push(t.clone());
        }
        points.push(CurvePoint::new("best-of-n", w, correct, questions.len(), budget));
        chosen.push(picks);
    }
    Ok(SweepResult { points, chosen })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmAccuracyReport {
    pub split: String,
    pub threshold: f64,
    pub step_accuracy: f64,
    pub answer_accuracy: f64,
    pub steps: usize,
    pub answers: usize,
}

/// Agreement between thresholded scorer output and record labels. A step
/// label is positive when its value is at least 0.5; a prediction is
/// positive when the score is at least `threshold`.
pub fn prm_accuracy<S: Scorer + ?Sized>(
    records: &[ProcessRecord],
    scorer: &S,
    threshold: f64,
    split: &str,
) -> Result<PrmAccuracyReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("no labeled records".into()));
    }
    let per_record = records
        .par_iter()
        .map(|r| -> Result<(usize, usize, bool), EvalError> {
            let q = Question::new(r.question_id.clone(), "");
            let s = score_trace(scorer, &q, &r.trace)?;
            let hits = s
                .step_scores
                .iter()
                .zip(&r.step_values)
                .filter(|(p, v)| (**p >= threshold) == (**v >= 0.5))
                .count();
            Ok((hits, s.step_scores.len(), (s.answer_score >= threshold) == r.answer_correct))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let step_hits: usize = per_record.iter().map(|r| r.0).sum();
    let steps: usize = per_record.iter().map(|r| r.1).sum();
    let answer_hits = per_record.iter().filter(|r| r.2).count();
    if steps == 0 {
        return Err(EvalError::Empty("records have no steps".into()));
    }
    Ok(PrmAccuracyReport {
        split: split.to_string(),
        threshold,
        step_accuracy: step_hits as f64 / steps as f64,
        answer_accuracy: answer_hits as f64 / records.len() as f64,
        steps,
        answers: records.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthPoint {
    pub round: u32,
    pub traces: usize,
    pub mean_steps: f64,
    /// Population standard deviation.
    pub sd_steps: f64,
}

/// Mean and spread of step counts per round.
pub fn step_length_stats(rounds: &BTreeMap<u32, Vec<usize>>) -> Result<Vec<LengthPoint>, EvalError> {
    rounds
        .iter()
        .map(|(&round, counts)| {
            if counts.is_empty() {
                return Err(EvalError::Empty(format!("round {round} has no traces")));
            }
            let n = counts.len() as f64;
            let mean = counts.iter().sum::<usize>() as f64 / n;
            let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
            Ok(LengthPoint {
                round,
                traces: counts.len(),
                mean_steps: mean,
                sd_steps: var.sqrt(),
            })
        })
        .collect()
}

/// One-sided exact sign test on paired outcomes: the probability, under
/// no difference, of `a` beating `b` on at least as many discordant
/// questions as observed.
pub fn paired_sign_test(a: &[bool], b: &[bool]) -> f64 {
    let wins = a.iter().zip(b).filter(|(x, y)| **x && !**y).count() as u64;
    let losses = a.iter().zip(b).filter(|(x, y)| !**x && **y).count() as u64;
    let n = wins + losses;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    let bin = Binomial::new(0.5, n).expect("valid binomial");
    bin.sf(wins - 1)
}

/// Provenance written at the top of every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub seed: u64,
    pub config_sha256: String,
}

impl ReportHeader {
    pub fn new<C: Serialize>(seed: u64, config: &C) -> Result<Self, EvalError> {
        Ok(Self {
            seed,
            config_sha256: config_hash(config)?,
        })
    }
}

/// SHA-256 of the config's JSON form. Object keys are sorted, so the hash
/// depends on field values only.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String, EvalError> {
    let value = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&value)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Serialize)]
struct JsonReport<'a, T> {
    seed: u64,
    config_sha256: &'a str,
    rows: &'a [T],
}

/// Writes rows as CSV (with `#` comment lines for the header) or as one
/// JSON document. Column order follows the row type's field order.
pub fn emit_report<T: Serialize, W: Write>(
    rows: &[T],
    header: &ReportHeader,
    format: ReportFormat,
    mut out: W,
) -> Result<(), EvalError> {
    match format {
        ReportFormat::Csv => {
            writeln!(out, "# seed: {}", header.seed)?;
            writeln!(out, "# config_sha256: {}", header.config_sha256)?;
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let doc = JsonReport {
                seed: header.seed,
                config_sha256: &header.config_sha256,
                rows,
            };
            serde_json::to_writer_pretty(&mut out, &doc)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads a CSV report back; returns the header (if present) and the rows.
pub fn read_csv_report<T: DeserializeOwned, R: Read>(mut input: R) -> Result<(Option<ReportHeader>, Vec<T>), EvalError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let mut seed = None;
    let mut hash = None;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(v) = line.strip_prefix("# seed: ") {
            seed = v.trim().parse().ok();
        } else if let Some(v) = line.strip_prefix("# config_sha256: ") {
            hash = Some(v.trim().to_string());
        }
    }
    let header = match (seed, hash) {
        (Some(seed), Some(config_sha256)) => Some(ReportHeader { seed, config_sha256 }),
        _ => None,
    };
    let rows = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()?;
    Ok((header, rows))
}
