//! Chain-of-step reasoning toolkit: structured traces, step annotation,
//! reward aggregation, preference mining and inference-time search, with
//! a seeded reasoning-tree simulator standing in for real models.

pub mod annotate;
pub mod eval;
pub mod jsonl;
pub mod policy;
pub mod prefmine;
pub mod reward;
pub mod rng;
pub mod scale;
pub mod trace;
pub mod wire;

pub use annotate::{AnswerMatcher, Judge, JudgeLabel, Method, ProcessRecord};
pub use policy::{
    Continuation, Policy, PolicyError, PolicyRequest, Question, SamplingParams, SimPolicy, SimState, SimTreeSpec,
};
pub use prefmine::{MiningConfig, PreferencePair, Regime};
pub use reward::{OracleConfig, OracleScorer, RewardWeights, Scorer, StepwiseScores};
pub use scale::{SampleBudget, ScaleConfig, Strategy, StrategyOutcome};
pub use trace::{ParseMode, Step, Trace};
