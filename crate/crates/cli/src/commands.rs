use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use cos_core::annotate::{emit_prm_dataset, judge_record, mc_annotate, Judge, McConfig, ProcessRecord, SimJudge};
use cos_core::eval::{
    emit_report, prm_accuracy, scaling_curve, step_length_stats, weight_sweep, CurvePoint, ReportFormat, ReportHeader,
};
use cos_core::jsonl::{read_jsonl, write_jsonl, write_jsonl_record};
use cos_core::policy::{exact_success_prob, Policy, RetryPolicy, SimPolicy, SimState, SimTreeSpec};
use cos_core::prefmine::{mine_pairs, plan_iterative_rounds};
use cos_core::reward::{OracleScorer, Scorer};
use cos_core::scale::{run_strategy_suite, ScaleConfig, Strategy, SuiteCsvRow};
use cos_core::trace::{parse_trace, serialize_trace, ParseMode, TraceRecord};
use cos_core::{JudgeLabel, Question};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::config::{usage, BackendKind, RunConfig, SEED_ENV};
use crate::io::{input, must_exist, output, read_all};
use crate::remote::{RemoteClient, RemoteJudge, RemotePolicy, RemoteScorer};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let cfg = resolve_config(&cli.global, std::env::var(SEED_ENV).ok().as_deref())?;
    match cli.command {
        Command::Trace(c) => trace(c),
        Command::Annotate(c) => annotate(c, cfg),
        Command::Scale(ScaleCmd::Run(a)) => scale_run(a, cfg),
        Command::Mine(a) => mine(a, cfg),
        Command::Eval(c) => eval(c, cfg),
        Command::Sim(c) => sim(c, cfg),
    }
}

/// Merges the config file, `COS_SEED` and the global flags.
pub fn resolve_config(g: &GlobalArgs, env_seed: Option<&str>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &g.spec {
        must_exist(p)?;
        let text = std::fs::read_to_string(p)?;
        let spec: SimTreeSpec =
            serde_json::from_str(&text).map_err(|e| usage(format!("spec {}: {e}", p.display())))?;
        cfg.sim = Some(spec);
    }
    if let Some(b) = g.backend {
        cfg.backend = b;
    }
    if g.base_url.is_some() {
        cfg.base_url = g.base_url.clone();
    }
    if g.questions.is_some() {
        cfg.questions = g.questions.clone();
    }
    macro_rules! set {
        ($($field:ident),*) => {$( if let Some(v) = g.$field.clone() { cfg.$field = v; } )*};
    }
    set!(num_questions, step_weight, matcher, noise_step, noise_answer, answer_evidence);
    if let Some(t) = g.step_truth {
        cfg.step_truth = t.into();
    }
    cfg.resolve_seed(g.seed, env_seed)?;
    cfg.validate()?;
    Ok(cfg)
}

pub struct Backends {
    pub policy: Box<dyn Policy>,
    pub scorer: Box<dyn Scorer>,
    pub judge: Box<dyn Judge>,
}

pub fn backends(cfg: &RunConfig) -> anyhow::Result<Backends> {
    Ok(match cfg.backend {
        BackendKind::Sim => Backends {
            policy: Box::new(SimPolicy::new(cfg.sim_spec())?),
            scorer: Box::new(OracleScorer::new(cfg.oracle())?),
            judge: Box::new(SimJudge),
        },
        BackendKind::Remote => {
            let url = cfg.base_url.as_deref().expect("validated base_url");
            let client = RemoteClient::new(url, Duration::from_secs(cfg.timeout_secs));
            Backends {
                policy: Box::new(RemotePolicy(client.clone())),
                scorer: Box::new(RemoteScorer(client.clone())),
                judge: Box::new(RemoteJudge(client)),
            }
        }
    })
}

/// What a report was produced from; its hash goes in the report header.
#[derive(Serialize)]
struct Provenance<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    config: &'a RunConfig,
}

fn header<A: Serialize>(command: &str, args: &A, cfg: &RunConfig) -> anyhow::Result<ReportHeader> {
    let p = Provenance {
        command,
        args,
        config: cfg,
    };
    Ok(ReportHeader::new(cfg.seed(), &p)?)
}

/// Writes `<report>.config.json` next to a report so the run can be
/// repeated from it.
fn write_sidecar<A: Serialize>(report: &Path, command: &str, args: &A, cfg: &RunConfig) -> anyhow::Result<()> {
    let p = Provenance {
        command,
        args,
        config: cfg,
    };
    let mut name = report.as_os_str().to_owned();
    name.push(".config.json");
    let mut w = output(Some(Path::new(&name)))?;
    serde_json::to_writer_pretty(&mut w, &p)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn report<T: Serialize, A: Serialize>(
    rows: &[T],
    path: &Path,
    format: ReportFormat,
    command: &str,
    args: &A,
    cfg: &RunConfig,
) -> anyhow::Result<()> {
    let h = header(command, args, cfg)?;
    let mut w = output(Some(path))?;
    emit_report(rows, &h, format, &mut w)?;
    w.flush()?;
    if path != Path::new("-") {
        write_sidecar(path, command, args, cfg)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawTrace {
    question_id: String,
    raw_text: String,
}

fn mode(lenient: bool) -> ParseMode {
    if lenient {
        ParseMode::Lenient
    } else {
        ParseMode::Strict
    }
}

/// Runs `f` over each non-blank line, reporting failures on stderr. Fails
/// after the whole stream if any line did.
fn per_line<W: Write>(
    r: Box<dyn BufRead>,
    mut out: W,
    mut f: impl FnMut(&str, usize, &mut W) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let (mut bad, mut total) = (0usize, 0usize);
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        if let Err(e) = f(&line, i + 1, &mut out) {
            bad += 1;
            eprintln!("line {}: {e:#}", i + 1);
        }
    }
    out.flush()?;
    if bad > 0 {
        bail!("{bad} of {total} records failed");
    }
    Ok(())
}

fn trace(cmd: TraceCmd) -> anyhow::Result<()> {
    match cmd {
        TraceCmd::Parse(a) => {
            let m = mode(a.lenient);
            per_line(input(a.input.as_deref())?, output(a.out.as_deref())?, |line, no, w| {
                let raw: RawTrace = serde_json::from_str(line)?;
                let parsed = parse_trace(&raw.raw_text, m)?;
                for v in &parsed.violations {
                    eprintln!("line {no}: warning: {v:?}");
                }
                let mut t = parsed.trace;
                t.question_id = raw.question_id;
                write_jsonl_record(w, &TraceRecord::from_trace(t, Some(raw.raw_text)))?;
                Ok(())
            })
        }
        TraceCmd::Validate(a) => {
            let m = mode(a.lenient);
            let mut ok = 0usize;
            let res = per_line(input(a.input.as_deref())?, std::io::sink(), |line, _, _| {
                let rec: TraceRecord = serde_json::from_str(line)?;
                let t = rec.trace();
                t.validate()?;
                if let Some(raw) = &rec.raw_text {
                    let parsed = parse_trace(raw, m)?.trace;
                    if parsed.steps != t.steps || parsed.answer != t.answer {
                        bail!("raw_text does not match the structured fields");
                    }
                }
                ok += 1;
                Ok(())
            });
            eprintln!("{ok} valid records");
            res
        }
        TraceCmd::Render(a) => per_line(input(a.input.as_deref())?, output(a.out.as_deref())?, |line, _, w| {
            let rec: TraceRecord = serde_json::from_str(line)?;
            let raw = serialize_trace(&rec.trace())?;
            write_jsonl_record(w, &TraceRecord::from_trace(rec.trace(), Some(raw)))?;
            Ok(())
        }),
    }
}

/// Question text and golden answers by id.
fn question_index(cfg: &RunConfig) -> anyhow::Result<HashMap<String, Question>> {
    if cfg.questions.is_none() && cfg.backend == BackendKind::Remote {
        return Err(usage("the remote backend needs --questions"));
    }
    let qs = if cfg.questions.is_some() { cfg.load_questions()? } else { Vec::new() };
    Ok(qs.into_iter().map(|q| (q.id.clone(), q)).collect())
}

fn lookup(index: &HashMap<String, Question>, cfg: &RunConfig, id: &str) -> anyhow::Result<(Question, String)> {
    let q = match index.get(id) {
        Some(q) => q.clone(),
        None if cfg.questions.is_none() => Question::new(id, "").with_golden(cos_core::policy::golden_answer(id)),
        None => bail!("question {id:?} is not in the questions file"),
    };
    let golden = q.golden.clone().ok_or_else(|| anyhow!("question {id:?} has no golden answer"))?;
    Ok((q, golden))
}

fn annotate(cmd: AnnotateCmd, mut cfg: RunConfig) -> anyhow::Result<()> {
    match cmd {
        AnnotateCmd::Mc(a) => {
            if let Some(r) = a.rollouts {
                cfg.rollouts = r;
            }
            let index = question_index(&cfg)?;
            let b = backends(&cfg)?;
            let mc = McConfig {
                rollouts: cfg.rollouts,
                sampling: cfg.sampling.clone(),
                matcher: cfg.matcher(),
                retry: RetryPolicy {
                    max_retries: cfg.max_retries,
                },
            };
            per_line(input(a.traces.as_deref())?, output(a.out.as_deref())?, |line, _, w| {
                let rec: TraceRecord = serde_json::from_str(line)?;
                let (q, golden) = lookup(&index, &cfg, &rec.question_id)?;
                let r = mc_annotate(&*b.policy, &q, &rec.trace(), &golden, &mc)?;
                write_jsonl_record(w, &r)?;
                Ok(())
            })
        }
        AnnotateCmd::Fuse(a) => {
            let index = question_index(&cfg)?;
            let labels: Option<HashMap<String, Vec<JudgeLabel>>> = match &a.labels {
                Some(p) => {
                    must_exist(p)?;
                    let rows: Vec<LabelRow> = read_all(p)?;
                    Some(rows.into_iter().map(|r| (r.question_id, r.labels)).collect())
                }
                None => None,
            };
            let b = backends(&cfg)?;
            let matcher = cfg.matcher();
            per_line(input(a.traces.as_deref())?, output(a.out.as_deref())?, |line, _, w| {
                let rec: TraceRecord = serde_json::from_str(line)?;
                let (q, golden) = lookup(&index, &cfg, &rec.question_id)?;
                let t = rec.trace();
                let l = match &labels {
                    Some(m) => m
                        .get(&rec.question_id)
                        .cloned()
                        .ok_or_else(|| anyhow!("no labels for {:?}", rec.question_id))?,
                    None => b.judge.judge(&q, &t)?,
                };
                let r = judge_record(&t, &l, matcher.matches(&t.answer, &golden))?;
                write_jsonl_record(w, &r)?;
                Ok(())
            })
        }
        AnnotateCmd::Emit(a) => {
            let threshold = a.threshold.unwrap_or(cfg.binarize_threshold);
            let records = read_jsonl::<ProcessRecord, _>(input(a.records.as_deref())?);
            let mut err = None;
            let mut w = output(a.out.as_deref())?;
            let rows = emit_prm_dataset(
                records.map_while(|r| r.map_err(|e| err = Some(e)).ok()),
                threshold,
                &mut w,
            )?;
            w.flush()?;
            if let Some(e) = err {
                return Err(e.into());
            }
            eprintln!("{rows} rows");
            Ok(())
        }
    }
}

#[derive(Deserialize)]
struct LabelRow {
    question_id: String,
    labels: Vec<JudgeLabel>,
}

fn strategies(list: &[Strategy]) -> Vec<Strategy> {
    if list.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        list.to_vec()
    }
}

fn scale_config(cfg: &mut RunConfig, beam_width: Option<usize>) -> anyhow::Result<ScaleConfig> {
    if let Some(b) = beam_width {
        cfg.beam_width = b;
    }
    cfg.validate()?;
    cfg.scale()
}

fn check_grid(grid: &[usize]) -> anyhow::Result<()> {
    if grid.is_empty() || grid.contains(&0) {
        return Err(usage("--n-grid needs positive values"));
    }
    Ok(())
}

fn scale_run(a: ScaleRunArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    check_grid(&a.n_grid)?;
    let scale = scale_config(&mut cfg, a.beam_width)?;
    let qs = cfg.load_questions()?;
    let b = backends(&cfg)?;
    let rows = run_strategy_suite(&*b.policy, &*b.scorer, &qs, &strategies(&a.strategies), &a.n_grid, &scale, a.timing)?;
    let csv: Vec<SuiteCsvRow> = rows.iter().map(SuiteCsvRow::from).collect();
    let format = match a.format {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
    };
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("-"));
    report(&csv, &out, format, "scale run", &a, &cfg)
}

fn mine(a: MineArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    if let Some(k) = a.plan_rounds {
        if k == 0 {
            return Err(usage("--plan-rounds must be at least 1"));
        }
        let mut w = output(a.out.as_deref())?;
        serde_json::to_writer_pretty(&mut w, &plan_iterative_rounds(k, &a.reference))?;
        writeln!(w)?;
        w.flush()?;
        return Ok(());
    }
    if let Some(r) = a.regime {
        cfg.regime = r;
    }
    if let Some(t) = a.threshold {
        cfg.margin_threshold = t;
    }
    if let Some(r) = a.round {
        cfg.round = r;
    }
    if let Some(p) = a.paths {
        cfg.paths_per_question = p;
    }
    let mining = cfg.mining()?;
    let scale = cfg.scale()?;
    let qs = cfg.load_questions()?;
    let b = backends(&cfg)?;
    let res = mine_pairs(&*b.policy, &*b.scorer, &qs, &mining, &scale)?;
    let mut w = output(a.out.as_deref())?;
    write_jsonl(&mut w, &res.pairs)?;
    w.flush()?;
    eprintln!(
        "{} pairs, {} questions skipped, {} policy calls",
        res.pairs.len(),
        res.skipped,
        res.budget.policy_calls
    );
    Ok(())
}

fn eval(cmd: EvalCmd, mut cfg: RunConfig) -> anyhow::Result<()> {
    match cmd {
        EvalCmd::Sweep(a) => {
            if !(a.grid_step > 0.0 && a.grid_step <= 1.0) {
                return Err(usage("--grid-step must lie in (0, 1]"));
            }
            if a.n == 0 {
                return Err(usage("-n must be at least 1"));
            }
            let scale = cfg.scale()?;
            let qs = cfg.load_questions()?;
            let b = backends(&cfg)?;
            let grid = cos_core::eval::linspace_grid(a.grid_step);
            let sweep = weight_sweep(&*b.policy, &*b.scorer, &qs, &grid, a.n, &scale)?;
            report(&sweep.points, &a.out.join("sweep.csv"), ReportFormat::Csv, "eval sweep", &a, &cfg)
        }
        EvalCmd::Scaling(a) => {
            check_grid(&a.n_grid)?;
            let scale = scale_config(&mut cfg, a.beam_width)?;
            let qs = cfg.load_questions()?;
            let b = backends(&cfg)?;
            let rows = run_strategy_suite(&*b.policy, &*b.scorer, &qs, &strategies(&a.strategies), &a.n_grid, &scale, false)?;
            let points: Vec<CurvePoint> = scaling_curve(&rows);
            report(&points, &a.out.join("scaling.csv"), ReportFormat::Csv, "eval scaling", &a, &cfg)
        }
        EvalCmd::PrmAcc(a) => {
            must_exist(&a.records)?;
            let records: Vec<ProcessRecord> = read_all(&a.records)?;
            let b = backends(&cfg)?;
            let r = prm_accuracy(&records, &*b.scorer, a.threshold, &a.split)?;
            report(&[r], &a.out.join("prm_acc.csv"), ReportFormat::Csv, "eval prm-acc", &a, &cfg)
        }
        EvalCmd::Length(a) => {
            let mut rounds: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for spec in &a.rounds {
                let (r, p) = spec
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--round {spec:?}: expected ROUND=FILE")))?;
                let r: u32 = r.parse().map_err(|_| usage(format!("--round {spec:?}: bad round number")))?;
                let p = Path::new(p);
                must_exist(p)?;
                let recs: Vec<TraceRecord> = read_all(p)?;
                rounds.entry(r).or_default().extend(recs.iter().map(|t| t.steps.len()));
            }
            let stats = step_length_stats(&rounds)?;
            report(&stats, &a.out.join("length.csv"), ReportFormat::Csv, "eval length", &a, &cfg)
        }
    }
}

#[derive(Serialize)]
struct OracleRow {
    on_good_path: bool,
    depth_remaining: usize,
    success_prob: f64,
}

fn sim(cmd: SimCmd, cfg: RunConfig) -> anyhow::Result<()> {
    match cmd {
        SimCmd::MakeSpec(a) => {
            let spec = SimTreeSpec {
                depth: a.depth,
                branching: a.branching,
                p_good_given_good: a.p_gg,
                p_good_given_bad: a.p_gb,
                p_correct_answer_given_good_leaf: a.a_good,
                p_correct_answer_given_bad_leaf: a.a_bad,
                seed: cfg.seed(),
                malformed_rate: a.malformed_rate,
            };
            spec.validate().map_err(|e| usage(e.to_string()))?;
            let mut w = output(a.out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &spec)?;
            writeln!(w)?;
            w.flush()?;
            Ok(())
        }
        SimCmd::Oracle(a) => {
            let spec = cfg.sim_spec();
            let rows: Vec<OracleRow> = (0..=spec.depth)
                .rev()
                .flat_map(|d| [true, false].map(|g| (g, d)))
                .map(|(g, d)| OracleRow {
                    on_good_path: g,
                    depth_remaining: d,
                    success_prob: exact_success_prob(&spec, SimState::new(g, d)),
                })
                .collect();
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("-"));
            report(&rows, &out, ReportFormat::Csv, "sim oracle", &a, &cfg).context("writing oracle table")
        }
    }
}
