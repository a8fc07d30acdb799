use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::json;

fn cos(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cos"))
        .current_dir(dir)
        .env_remove("COS_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn cos_stdin(dir: &Path, args: &[&str], stdin: &str) -> Output {
    use std::io::Write;
    let mut child = Command::new(env!("CARGO_BIN_EXE_cos"))
        .current_dir(dir)
        .env_remove("COS_SEED")
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn good_trace() -> String {
    json!({
        "question_id": "q1",
        "steps": [{"name": "Count", "thought": "Three apples.", "reflection": "Checked."}],
        "answer": "3"
    })
    .to_string()
}

#[test]
fn validate_good_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let ok = cos_stdin(dir.path(), &["trace", "validate"], &format!("{}\n", good_trace()));
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));

    let bad = format!(
        "{}\nnot json\n{}\n",
        good_trace(),
        json!({"question_id": "q2", "steps": [], "answer": "1"})
    );
    let o = cos_stdin(dir.path(), &["trace", "validate"], &bad);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("line 2:") && err.contains("line 3:"), "{err}");
    assert!(!err.contains("line 1:"));
}

#[test]
fn render_then_parse_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let r = cos_stdin(dir.path(), &["trace", "render"], &format!("{}\n", good_trace()));
    assert_eq!(code(&r), 0);
    let rendered: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    let raw = json!({"question_id": "q1", "raw_text": rendered["raw_text"]}).to_string();
    let p = cos_stdin(dir.path(), &["trace", "parse"], &format!("{raw}\n"));
    assert_eq!(code(&p), 0);
    let parsed: serde_json::Value = serde_json::from_slice(&p.stdout).unwrap();
    assert_eq!(parsed, rendered);
    let v = cos_stdin(dir.path(), &["trace", "validate"], &String::from_utf8(p.stdout).unwrap());
    assert_eq!(code(&v), 0);
}

#[test]
fn usage_errors_exit_two_with_a_synopsis() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["scale", "run", "--n-grid", "x"],
        &["scale", "run", "--n-grid", "0"],
        &["--backend", "remote", "scale", "run"],
        &["--base-url", "http://localhost:1", "scale", "run"],
        &["--questions", "missing.jsonl", "scale", "run"],
        &["--config", "missing.json", "scale", "run"],
    ] {
        let o = cos(dir.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains("Usage:"), "{args:?}");
    }
    let help = cos(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8(help.stdout).unwrap();
    assert!(text.contains("COS_SEED") && text.contains("precedence"));
}

fn scale_run(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["--num-questions", "30", "scale", "run", "--n-grid", "1,4,8", "--out", out];
    args.extend_from_slice(extra);
    let o = cos(dir, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::read_to_string(dir.join(out)).unwrap()
}

#[test]
fn runs_are_reproducible_and_thread_count_free() {
    let dir = tempfile::tempdir().unwrap();
    let a = scale_run(dir.path(), "a.csv", &["--seed", "7"]);
    let b = scale_run(dir.path(), "b.csv", &["--seed", "7"]);
    let c = scale_run(dir.path(), "c.csv", &["--seed", "7", "--jobs", "1"]);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(a.starts_with("# seed: 7\n# config_sha256: "));
    let d = scale_run(dir.path(), "d.csv", &["--seed", "8"]);
    assert_ne!(a, d);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.csv.config.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["seed"], 7);
    assert_eq!(sidecar["command"], "scale run");
}

#[test]
fn seed_precedence_flag_env_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"seed": 3, "num_questions": 5}"#).unwrap();
    let seed_of = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_cos"));
        c.current_dir(dir.path()).env_remove("COS_SEED");
        if let Some(e) = env {
            c.env("COS_SEED", e);
        }
        c.args(["--config", "cfg.json"]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        let o = c.args(["scale", "run", "--n-grid", "1", "--strategies", "single"]).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let out = String::from_utf8(o.stdout).unwrap();
        out.lines().next().unwrap().trim_start_matches("# seed: ").parse::<u64>().unwrap()
    };
    assert_eq!(seed_of(None, None), 3);
    assert_eq!(seed_of(Some("5"), None), 5);
    assert_eq!(seed_of(Some("5"), Some("9")), 9);
}

#[test]
fn pipeline_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let spec = cos(p, &["--seed", "4", "sim", "make-spec", "--out", "spec.json"]);
    assert_eq!(code(&spec), 0);
    let mine = cos(p, &["--spec", "spec.json", "--num-questions", "6", "mine", "--threshold", "0", "-o", "pairs.jsonl"]);
    assert_eq!(code(&mine), 0, "{}", stderr(&mine));
    let pairs = std::fs::read_to_string(p.join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 6 - stderr(&mine).split(", ").nth(1).unwrap().split(' ').next().unwrap().parse::<usize>().unwrap());

    let traces: String = pairs
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            format!("{}\n", json!({"question_id": v["question_id"], "steps": v["chosen"]["steps"], "answer": v["chosen"]["answer"]}))
        })
        .collect();
    std::fs::write(p.join("traces.jsonl"), &traces).unwrap();
    let before = std::fs::read(p.join("traces.jsonl")).unwrap();
    for args in [
        &["--spec", "spec.json", "annotate", "mc", "traces.jsonl", "--rollouts", "8", "-o", "mc.jsonl"][..],
        &["--spec", "spec.json", "annotate", "fuse", "traces.jsonl", "-o", "fuse.jsonl"],
        &["annotate", "emit", "mc.jsonl", "--threshold", "0.5", "-o", "prm.jsonl"],
        &["--spec", "spec.json", "eval", "prm-acc", "--records", "fuse.jsonl", "-o", "ev"],
        &["eval", "length", "--round", "1=traces.jsonl", "-o", "ev"],
    ] {
        let o = cos(p, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    assert_eq!(std::fs::read(p.join("traces.jsonl")).unwrap(), before);
    let rows = std::fs::read_to_string(p.join("prm.jsonl")).unwrap();
    // three steps plus the answer row per record
    assert_eq!(rows.lines().count(), 4 * traces.lines().count());
    let acc = std::fs::read_to_string(p.join("ev/prm_acc.csv")).unwrap();
    assert!(acc.contains("split,threshold,step_accuracy"));
}

#[test]
fn eval_reports_land_in_the_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let s = cos(p, &["--num-questions", "10", "eval", "sweep", "--grid-step", "0.5", "-n", "4", "-o", "ev"]);
    assert_eq!(code(&s), 0, "{}", stderr(&s));
    let sweep = std::fs::read_to_string(p.join("ev/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3);
    let s = cos(p, &["--num-questions", "10", "eval", "scaling", "--n-grid", "1,2", "-o", "ev"]);
    assert_eq!(code(&s), 0);
    let scaling = std::fs::read_to_string(p.join("ev/scaling.csv")).unwrap();
    assert!(scaling.contains("ci_low"));
}

#[test]
fn manifest_and_oracle_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = cos(dir.path(), &["mine", "--plan-rounds", "3"]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["rounds"].as_array().unwrap().len(), 3);
    let o = cos(dir.path(), &["sim", "oracle"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("true,0,1.0"));
}
