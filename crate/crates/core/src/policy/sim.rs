//! Synthetic reasoning-tree environment.
//!
//! Every sampled step either keeps the path correct or not, with fixed
//! transition probabilities, so the chance that a rollout from any state
//! reaches the golden answer has a closed form. Steps carry their hidden
//! state in a `[sim:g:2]`-style tag inside the step name, which lets
//! oracles decode any prefix without side channels.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Continuation, Policy, PolicyError, PolicyRequest, SamplingParams};
use crate::rng::StreamKey;
use crate::trace::{parse_prefix, render_steps, PrefixEnd, SpecialToken, Step, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTreeSpec {
    /// Number of steps from the root to an answer.
    pub depth: usize,
    /// Surface variants per step, and number of wrong answers.
    pub branching: usize,
    pub p_good_given_good: f64,
    #[serde(default)]
    pub p_good_given_bad: f64,
    pub p_correct_answer_given_good_leaf: f64,
    #[serde(default)]
    pub p_correct_answer_given_bad_leaf: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of continuations deliberately corrupted, for exercising
    /// the malformed-output paths. Zero in normal use.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub malformed_rate: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl Default for SimTreeSpec {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 4,
            p_good_given_good: 0.8,
            p_good_given_bad: 0.0,
            p_correct_answer_given_good_leaf: 1.0,
            p_correct_answer_given_bad_leaf: 0.0,
            seed: 0,
            malformed_rate: 0.0,
        }
    }
}

impl SimTreeSpec {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.depth == 0 {
            return Err(PolicyError::InvalidSpec("depth must be at least 1".into()));
        }
        if self.branching == 0 {
            return Err(PolicyError::InvalidSpec("branching must be at least 1".into()));
        }
        for (name, p) in [
            ("p_good_given_good", self.p_good_given_good),
            ("p_good_given_bad", self.p_good_given_bad),
            ("p_correct_answer_given_good_leaf", self.p_correct_answer_given_good_leaf),
            ("p_correct_answer_given_bad_leaf", self.p_correct_answer_given_bad_leaf),
            ("malformed_rate", self.malformed_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PolicyError::InvalidSpec(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> SimState {
        SimState {
            on_good_path: true,
            depth_remaining: self.depth,
        }
    }
}

/// Hidden state after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimState {
    pub on_good_path: bool,
    pub depth_remaining: usize,
}

impl SimState {
    pub fn new(on_good_path: bool, depth_remaining: usize) -> Self {
        Self {
            on_good_path,
            depth_remaining,
        }
    }

    fn tag(self) -> String {
        let g = if self.on_good_path { 'g' } else { 'b' };
        format!("[sim:{g}:{}]", self.depth_remaining)
    }

    /// Recovers the state from a simulator step.
    pub fn decode(step: &Step) -> Option<SimState> {
        let start = step.name.rfind("[sim:")?;
        let body = &step.name[start + 5..];
        let body = &body[..body.find(']')?];
        let (g, d) = body.split_once(':')?;
        let on_good_path = match g {
            "g" => true,
            "b" => false,
            _ => return None,
        };
        Some(SimState {
            on_good_path,
            depth_remaining: d.parse().ok()?,
        })
    }
}

/// Probability that one rollout from `state` ends in the golden answer.
pub fn exact_success_prob(spec: &SimTreeSpec, state: SimState) -> f64 {
    let mut good = spec.p_correct_answer_given_good_leaf;
    let mut bad = spec.p_correct_answer_given_bad_leaf;
    for _ in 0..state.depth_remaining {
        let g = spec.p_good_given_good * good + (1.0 - spec.p_good_given_good) * bad;
        let b = spec.p_good_given_bad * good + (1.0 - spec.p_good_given_bad) * bad;
        good = g;
        bad = b;
    }
    if state.on_good_path {
        good
    } else {
        bad
    }
}

fn question_number(question_id: &str) -> u64 {
    let digest = Sha256::digest(question_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    100 + u64::from_le_bytes(head) % 900_000
}

/// The golden answer the simulator associates with a question.
pub fn golden_answer(question_id: &str) -> String {
    question_number(question_id).to_string()
}

fn distractor(question_id: &str, j: usize) -> String {
    (question_number(question_id) + 1 + j as u64).to_string()
}

pub fn sim_policy(spec: SimTreeSpec) -> Result<SimPolicy, PolicyError> {
    SimPolicy::new(spec)
}

#[derive(Debug, Clone)]
pub struct SimPolicy {
    spec: SimTreeSpec,
}

impl SimPolicy {
    pub fn new(spec: SimTreeSpec) -> Result<Self, PolicyError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SimTreeSpec {
        &self.spec
    }

    pub fn golden_answer(&self, question_id: &str) -> String {
        golden_answer(question_id)
    }

    /// Text of a step landing in `state` as the `index`-th step (1-based).
    pub fn render_step(&self, state: SimState, index: usize, variant: usize) -> Step {
        let (thought, reflection) = if state.on_good_path {
            (
                format!("Apply approach {variant}; every constraint of the question is respected."),
                format!("Consistent with the figure and with step {}.", index.saturating_sub(1)),
            )
        } else {
            (
                format!("Apply approach {variant}; one constraint of the question is dropped."),
                format!("Does not match the figure or step {}.", index.saturating_sub(1)),
            )
        };
        Step::new(
            format!("Step {index}: approach {variant} {}", state.tag()),
            thought,
            reflection,
        )
    }

    /// Builds a complete trace that follows `path` (goodness after each
    /// step); handy for annotation experiments on known states.
    pub fn trace_along(&self, question_id: &str, path: &[bool], answer: impl Into<String>) -> Trace {
        let depth = self.spec.depth;
        let steps = path
            .iter()
            .enumerate()
            .map(|(i, &good)| {
                let state = SimState::new(good, depth.saturating_sub(i + 1));
                self.render_step(state, i + 1, 0)
            })
            .collect();
        Trace::new(question_id, steps, answer)
    }

    fn state_after(&self, steps: &[Step]) -> Result<SimState, PolicyError> {
        match steps.last() {
            None => Ok(self.spec.root()),
            Some(step) => SimState::decode(step).ok_or_else(|| {
                PolicyError::InvalidRequest("prefix step carries no simulator state tag".into())
            }),
        }
    }

    fn draw_step(&self, req: &PolicyRequest, steps: &[Step], index: u64, state: SimState) -> (SimState, usize, f64) {
        let mut rng = StreamKey::new(self.spec.seed, "sim-step")
            .str(&req.question_id)
            .str(&render_steps(steps))
            .u64(req.ordinal)
            .u64(index)
            .rng();
        let p = if state.on_good_path {
            self.spec.p_good_given_good
        } else {
            self.spec.p_good_given_bad
        };
        let good = rng.gen::<f64>() < p;
        let variant = rng.gen_range(0..self.spec.branching);
        let next = SimState::new(good, state.depth_remaining - 1);
        let lp = if good { p } else { 1.0 - p }.ln() - (self.spec.branching as f64).ln();
        (next, variant, lp)
    }

    fn draw_answer(&self, req: &PolicyRequest, steps: &[Step], index: u64, state: SimState) -> (String, f64) {
        let mut rng = StreamKey::new(self.spec.seed, "sim-answer")
            .str(&req.question_id)
            .str(&render_steps(steps))
            .u64(req.ordinal)
            .u64(index)
            .rng();
        let p = if state.on_good_path {
            self.spec.p_correct_answer_given_good_leaf
        } else {
            self.spec.p_correct_answer_given_bad_leaf
        };
        if rng.gen::<f64>() < p {
            (golden_answer(&req.question_id), p.ln())
        } else {
            let j = rng.gen_range(0..self.spec.branching);
            let lp = (1.0 - p).ln() - (self.spec.branching as f64).ln();
            (distractor(&req.question_id, j), lp)
        }
    }

    fn corrupt(&self, req: &PolicyRequest, index: u64, text: String) -> String {
        if self.spec.malformed_rate == 0.0 {
            return text;
        }
        let mut rng = StreamKey::new(self.spec.seed, "sim-malformed")
            .str(&req.question_id)
            .str(&req.prefix)
            .u64(req.ordinal)
            .u64(index)
            .rng();
        if rng.gen::<f64>() >= self.spec.malformed_rate {
            return text;
        }
        for tok in [SpecialToken::StepEnd, SpecialToken::ReasoningEnd] {
            if text.contains(tok.surface()) {
                return text.replacen(tok.surface(), "", 1);
            }
        }
        text
    }
}

impl Policy for SimPolicy {
    fn sample(&self, req: &PolicyRequest, params: &SamplingParams) -> Result<Vec<Continuation>, PolicyError> {
        params.validate()?;
        let prefix = parse_prefix(&req.prefix)
            .map_err(|e| PolicyError::InvalidRequest(format!("bad prefix: {e}")))?;
        let start_state = self.state_after(&prefix.steps)?;
        if prefix.end == PrefixEnd::AfterProceed && start_state.depth_remaining == 0 {
            return Err(PolicyError::InvalidRequest(
                "prefix requests a step past the simulator depth".into(),
            ));
        }
        if !req.stop_at_step && start_state.depth_remaining > params.max_steps {
            return Err(PolicyError::InvalidRequest(format!(
                "{} steps remain but max_steps is {}",
                start_state.depth_remaining, params.max_steps
            )));
        }

        let mut out = Vec::with_capacity(params.n);
        for i in 0..params.n as u64 {
            let mut text = String::new();
            let mut steps = prefix.steps.clone();
            let mut state = start_state;
            let mut log_prob = 0.0;
            let mut generated = 0;
            match prefix.end {
                PrefixEnd::Empty => text.push_str(SpecialToken::ReasoningStart.surface()),
                PrefixEnd::AfterStep if state.depth_remaining > 0 => {
                    text.push_str(SpecialToken::Proceed.surface())
                }
                _ => {}
            }
            let mut stopped = false;
            while state.depth_remaining > 0 {
                let (next, variant, lp) = self.draw_step(req, &steps, i, state);
                let step = self.render_step(next, steps.len() + 1, variant);
                text.push_str(&render_steps(std::slice::from_ref(&step)));
                steps.push(step);
                state = next;
                log_prob += lp;
                generated += 1;
                if state.depth_remaining > 0 {
                    text.push_str(SpecialToken::Proceed.surface());
                    if req.stop_at_step {
                        stopped = true;
                        break;
                    }
                }
            }
            if !stopped {
                let (answer, lp) = self.draw_answer(req, &steps, i, state);
                text.push_str(SpecialToken::ReasoningEnd.surface());
                text.push_str(&answer);
                log_prob += lp;
            }
            out.push(Continuation {
                text: self.corrupt(req, i, text),
                steps_generated: generated,
                log_prob: log_prob.is_finite().then_some(log_prob),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_validated, Question, RetryPolicy};
    use crate::trace::{parse_trace, prefix_at, ParseMode};

    fn spec(p_gg: f64) -> SimTreeSpec {
        SimTreeSpec {
            depth: 3,
            branching: 4,
            p_good_given_good: p_gg,
            seed: 11,
            ..SimTreeSpec::default()
        }
    }

    /// Sums path probabilities over all 2^d good/bad sequences.
    fn enumerate_success(spec: &SimTreeSpec, state: SimState) -> f64 {
        let d = state.depth_remaining;
        let mut total = 0.0;
        for mask in 0..(1u32 << d) {
            let mut p = 1.0;
            let mut good = state.on_good_path;
            for bit in 0..d {
                let next = mask >> bit & 1 == 1;
                let pg = if good { spec.p_good_given_good } else { spec.p_good_given_bad };
                p *= if next { pg } else { 1.0 - pg };
                good = next;
            }
            p *= if good {
                spec.p_correct_answer_given_good_leaf
            } else {
                spec.p_correct_answer_given_bad_leaf
            };
            total += p;
        }
        total
    }

    #[test]
    fn closed_form_matches_enumeration() {
        let s = spec(0.8);
        assert!((exact_success_prob(&s, s.root()) - 0.512).abs() < 1e-12);
        assert!((enumerate_success(&s, s.root()) - 0.512).abs() < 1e-12);
        let odd = SimTreeSpec {
            depth: 5,
            p_good_given_good: 0.7,
            p_good_given_bad: 0.15,
            p_correct_answer_given_good_leaf: 0.9,
            p_correct_answer_given_bad_leaf: 0.2,
            ..s
        };
        for d in 0..=5 {
            for g in [true, false] {
                let st = SimState::new(g, d);
                assert!((exact_success_prob(&odd, st) - enumerate_success(&odd, st)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn base_case_and_absorbing_success() {
        let s = SimTreeSpec {
            p_correct_answer_given_good_leaf: 0.37,
            ..spec(0.5)
        };
        assert_eq!(exact_success_prob(&s, SimState::new(true, 0)), 0.37);
        let sure = SimTreeSpec {
            p_good_given_good: 1.0,
            p_correct_answer_given_good_leaf: 1.0,
            ..spec(1.0)
        };
        for d in 0..10 {
            assert_eq!(exact_success_prob(&sure, SimState::new(true, d)), 1.0);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(sim_policy(SimTreeSpec { depth: 0, ..spec(0.5) }).is_err());
        assert!(sim_policy(SimTreeSpec { branching: 0, ..spec(0.5) }).is_err());
        assert!(sim_policy(SimTreeSpec { p_good_given_bad: 1.5, ..spec(0.5) }).is_err());
    }

    #[test]
    fn sixteen_full_traces() {
        let sim = sim_policy(spec(0.6)).unwrap();
        let q = Question::new("q-1", "?");
        let req = PolicyRequest::new(&q, "");
        let out = sim.sample(&req, &SamplingParams::default()).unwrap();
        assert_eq!(out.len(), 16);
        for c in &out {
            let t = parse_trace(&c.text, ParseMode::Strict).unwrap().trace;
            assert_eq!(t.steps.len(), 3);
            assert_eq!(c.steps_generated, 3);
            assert!(c.log_prob.unwrap() < 0.0);
        }
    }

    #[test]
    fn deterministic_across_handles() {
        let q = Question::new("q-7", "?");
        let req = PolicyRequest::new(&q, "");
        let a = sim_policy(spec(0.6)).unwrap().sample(&req, &SamplingParams::default()).unwrap();
        let b = sim_policy(spec(0.6)).unwrap().sample(&req, &SamplingParams::default()).unwrap();
        assert_eq!(a, b);
        let other = sim_policy(SimTreeSpec { seed: 12, ..spec(0.6) })
            .unwrap()
            .sample(&req, &SamplingParams::default())
            .unwrap();
        assert_ne!(a, other);
        // continuation i does not depend on how many were requested
        let four = sim_policy(spec(0.6)).unwrap().sample(&req, &SamplingParams::default().with_n(4)).unwrap();
        assert_eq!(four[..], a[..4]);
    }

    #[test]
    fn degenerate_probabilities_always_golden() {
        let s = SimTreeSpec {
            p_good_given_good: 1.0,
            p_correct_answer_given_good_leaf: 1.0,
            ..spec(1.0)
        };
        let sim = sim_policy(s).unwrap();
        let q = Question::new("q-2", "?");
        for c in sim.sample(&PolicyRequest::new(&q, ""), &SamplingParams::default()).unwrap() {
            let t = parse_trace(&c.text, ParseMode::Strict).unwrap().trace;
            assert_eq!(t.answer, golden_answer("q-2"));
        }
    }

    #[test]
    fn single_branch_yields_identical_copies() {
        let s = SimTreeSpec {
            branching: 1,
            p_good_given_good: 1.0,
            ..spec(1.0)
        };
        let sim = sim_policy(s).unwrap();
        let out = sim
            .sample(&PolicyRequest::new(&Question::new("q", ""), ""), &SamplingParams::default())
            .unwrap();
        assert!(out.iter().all(|c| c.text == out[0].text));
    }

    #[test]
    fn golden_is_fixed_per_question() {
        assert_eq!(golden_answer("abc"), golden_answer("abc"));
        assert_ne!(golden_answer("abc"), golden_answer("abd"));
        assert_ne!(distractor("abc", 0), golden_answer("abc"));
    }

    #[test]
    fn state_tags_round_trip() {
        let sim = sim_policy(spec(0.5)).unwrap();
        for st in [SimState::new(true, 2), SimState::new(false, 0)] {
            assert_eq!(SimState::decode(&sim.render_step(st, 1, 3)), Some(st));
        }
        assert_eq!(SimState::decode(&Step::new("plain", "t", "r")), None);
    }

    #[test]
    fn continuations_extend_prefixes() {
        let sim = sim_policy(spec(0.6)).unwrap();
        let t = sim.trace_along("q-9", &[true, false, false], "1");
        for k in 1..=3 {
            let prefix = prefix_at(&t, k).unwrap().serialized_text;
            let mut req = PolicyRequest::new(&Question::new("q-9", ""), prefix.clone());
            for stop in [false, true] {
                req.stop_at_step = stop;
                let batch = sample_validated(&sim, &req, &SamplingParams::default().with_n(8), RetryPolicy::default()).unwrap();
                assert_eq!(batch.paths.len(), 8);
                assert_eq!(batch.malformed, 0);
                for p in &batch.paths {
                    assert_eq!(p.completion.steps()[..k], t.steps[..k]);
                    assert_eq!(p.continuation.steps_generated, p.completion.steps().len() - k);
                }
            }
        }
    }

    #[test]
    fn single_step_matches_full_sample_first_step() {
        let sim = sim_policy(spec(0.6)).unwrap();
        let q = Question::new("q-3", "");
        let full = sim.sample(&PolicyRequest::new(&q, ""), &SamplingParams::default()).unwrap();
        let one = sim
            .sample(&PolicyRequest::new(&q, "").single_step(), &SamplingParams::default())
            .unwrap();
        for (f, o) in full.iter().zip(&one) {
            assert!(f.text.starts_with(&o.text));
            assert_eq!(o.steps_generated, 1);
        }
    }

    #[test]
    fn prefix_without_tags_is_rejected() {
        let sim = sim_policy(spec(0.6)).unwrap();
        let t = Trace::new("q", vec![Step::new("n", "t", "r")], "a");
        let prefix = prefix_at(&t, 1).unwrap().serialized_text;
        let req = PolicyRequest::new(&Question::new("q", ""), prefix);
        assert!(matches!(
            sim.sample(&req, &SamplingParams::default()),
            Err(PolicyError::InvalidRequest(_))
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let sim = sim_policy(SimTreeSpec {
            malformed_rate: 1.0,
            ..spec(0.6)
        })
        .unwrap();
        let req = PolicyRequest::new(&Question::new("q", ""), "");
        let err = sample_validated(&sim, &req, &SamplingParams::default().with_n(3), RetryPolicy::default()).unwrap_err();
        assert_eq!(err, PolicyError::Malformed { malformed: 9, attempts: 3 });
    }
}
