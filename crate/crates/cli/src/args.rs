use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cos_core::prefmine::Regime;
use cos_core::reward::StepTruth;
use cos_core::scale::Strategy;
use serde::Serialize;

use crate::config::BackendKind;

const AFTER_HELP: &str = "\
Configuration precedence, highest first:
  1. command-line flags
  2. the COS_SEED environment variable (seed only)
  3. the JSON file given with --config
  4. built-in defaults (the seed falls back to the simulator spec's seed, then 0)

Environment:
  COS_SEED   master seed, an unsigned 64-bit integer; overridden by --seed

Exit status: 0 on success, 1 when the data or a backend fails, 2 on usage errors.";

#[derive(Debug, Parser)]
#[command(name = "cos", version, about = "Chain-of-step reasoning toolkit", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct GlobalArgs {
    /// Flat JSON run configuration
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores); results do not depend on it
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Server root for the remote backend, e.g. http://localhost:8000
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    /// Simulator tree spec (JSON)
    #[arg(long, global = true, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Questions JSONL: {id, text, golden?, images?}
    #[arg(long, global = true, value_name = "FILE")]
    pub questions: Option<PathBuf>,
    /// Synthetic questions to generate when no questions file is given
    #[arg(long, global = true)]
    pub num_questions: Option<usize>,
    /// Weight of the mean step score in the aggregate reward
    #[arg(long, global = true)]
    pub step_weight: Option<f64>,
    /// Answer matcher: exact, default, numeric, multiple-choice, or a
    /// comma list of case-fold, strip-punct, numeric, mc-letter
    #[arg(long, global = true)]
    pub matcher: Option<String>,
    /// Oracle scorer noise on step scores
    #[arg(long, global = true)]
    pub noise_step: Option<f64>,
    /// Oracle scorer noise on answer scores
    #[arg(long, global = true)]
    pub noise_answer: Option<f64>,
    /// Share of the oracle answer score driven by the realized answer
    #[arg(long, global = true)]
    pub answer_evidence: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub step_truth: Option<StepTruthArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum StepTruthArg {
    OnPath,
    SuccessProb,
}

impl From<StepTruthArg> for StepTruth {
    fn from(a: StepTruthArg) -> Self {
        match a {
            StepTruthArg::OnPath => StepTruth::OnPath,
            StepTruthArg::SuccessProb => StepTruth::SuccessProb,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse, validate and render reasoning traces
    #[command(subcommand)]
    Trace(TraceCmd),
    /// Step-level correctness labels and PRM datasets
    #[command(subcommand)]
    Annotate(AnnotateCmd),
    /// Inference-time scaling strategies
    #[command(subcommand)]
    Scale(ScaleCmd),
    /// Mine preference pairs
    Mine(MineArgs),
    /// Evaluation reports
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Simulator utilities
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Debug, Subcommand)]
pub enum TraceCmd {
    /// Raw text ({question_id, raw_text} JSONL) to trace records
    Parse(TraceIo),
    /// Check trace records; reports bad lines on stderr
    Validate(TraceIo),
    /// Fill raw_text of trace records from their structured fields
    Render(TraceIo),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TraceIo {
    /// Input JSONL (stdin when omitted)
    pub input: Option<PathBuf>,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Accept structural slips and report them as warnings
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCmd {
    /// Monte-Carlo rollout labels for each step
    Mc(McArgs),
    /// Judge labels fused with answer correctness
    Fuse(FuseArgs),
    /// Process records to PRM training rows
    Emit(EmitArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct McArgs {
    /// Trace records JSONL (stdin when omitted)
    pub traces: Option<PathBuf>,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Rollouts per step
    #[arg(long)]
    pub rollouts: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FuseArgs {
    /// Trace records JSONL (stdin when omitted)
    pub traces: Option<PathBuf>,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Judge labels JSONL ({question_id, labels}); the backend's judge is
    /// asked when omitted
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmitArgs {
    /// Process records JSONL (stdin when omitted)
    pub records: Option<PathBuf>,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Step values at or above this become label 1
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum ScaleCmd {
    /// Run strategies over an N grid and write a results table
    Run(ScaleRunArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScaleRunArgs {
    /// Comma-separated strategies (default: all)
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub n_grid: Vec<usize>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    /// Measure wall-clock time (makes reports irreproducible)
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MineArgs {
    /// step_answer_prm, answer_only_prm, outcome or per_step_wise
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Minimum score margin between chosen and rejected
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub round: Option<u32>,
    /// Sampled paths per question
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Write an iterative-round manifest with this many rounds instead of mining
    #[arg(long)]
    pub plan_rounds: Option<u32>,
    /// Reference policy for the manifest
    #[arg(long, default_value = "sft")]
    pub reference: String,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Best-of-N accuracy across step weights
    Sweep(SweepArgs),
    /// Accuracy and budget per strategy and N, with Wilson intervals
    Scaling(ScalingArgs),
    /// Agreement between a scorer and labeled process records
    PrmAcc(PrmAccArgs),
    /// Step-count statistics per round
    Length(LengthArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 0.1)]
    pub grid_step: f64,
    #[arg(long, short, default_value_t = 16)]
    pub n: usize,
    /// Report directory
    #[arg(long, short)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScalingArgs {
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub n_grid: Vec<usize>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrmAccArgs {
    /// Process records JSONL
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LengthArgs {
    /// ROUND=FILE pairs of trace record JSONL, repeatable
    #[arg(long = "round", value_name = "ROUND=FILE", required = true)]
    pub rounds: Vec<String>,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    /// Write a simulator tree spec
    MakeSpec(MakeSpecArgs),
    /// Exact success probability of every simulator state
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MakeSpecArgs {
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 4)]
    pub branching: usize,
    /// P(next step correct | on the correct path)
    #[arg(long, default_value_t = 0.8)]
    pub p_gg: f64,
    /// P(next step correct | off the correct path)
    #[arg(long, default_value_t = 0.0)]
    pub p_gb: f64,
    /// Answer accuracy at a correct leaf
    #[arg(long, default_value_t = 1.0)]
    pub a_good: f64,
    /// Answer accuracy at an incorrect leaf
    #[arg(long, default_value_t = 0.0)]
    pub a_bad: f64,
    #[arg(long, default_value_t = 0.0)]
    pub malformed_rate: f64,
    #[arg(long, short)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long, short)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}
