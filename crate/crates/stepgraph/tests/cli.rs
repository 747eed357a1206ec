//! End-to-end CLI checks: exit codes, persisted index round-trips, stdio
//! service behavior and the train -> eval -> report pipeline.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stepgraph"))
}

fn run(args: &[&str]) -> Output {
    cli().args(args).output().expect("spawn stepgraph")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_facts(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("facts.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"text":"alpha links beta","entities":["alpha","beta"]}"#, "\n",
            r#"{"text":"beta links gamma","entities":["beta","gamma"]}"#, "\n",
            r#"{"text":"gamma links delta","entities":["gamma","delta","alpha"]}"#, "\n",
        ),
    )
    .unwrap();
    path
}

#[test]
fn ingest_reports_counts_and_persists_index() {
    let tmp = tempfile::tempdir().unwrap();
    let facts = write_facts(tmp.path());
    let idx = tmp.path().join("idx");
    let out = run(&["ingest", facts.to_str().unwrap(), "--out", idx.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("|V|=4 |E|=3"), "{text}");
    assert!(text.contains("accepted=3 rejected=0 duplicates_collapsed=0"));
    assert!(text.contains("degree histogram:"));
    assert!(idx.join("facts.jsonl").exists());
    assert!(idx.join("incidence.bin").exists());
}

#[test]
fn ingest_empty_file_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let facts = tmp.path().join("empty.jsonl");
    std::fs::write(&facts, "").unwrap();
    let out = run(&["ingest", facts.to_str().unwrap(), "--out", tmp.path().join("idx").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("no valid fact records"));
}

#[test]
fn ingest_missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["ingest", "/nonexistent/facts.jsonl", "--out", tmp.path().join("idx").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn query_returns_ranked_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let facts = write_facts(tmp.path());
    let idx = tmp.path().join("idx");
    assert!(run(&["ingest", facts.to_str().unwrap(), "--out", idx.to_str().unwrap()]).status.success());

    let out = run(&["query", "--index", idx.to_str().unwrap(), "beta links", "--k", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).expect("JSON line"))
        .collect();
    assert_eq!(lines.len(), 2);
    for line in &lines {
        assert_eq!(line["mode"], "informativeness");
        assert!(line["score"].is_number());
        assert!(line["entities"].is_array());
    }
}

#[test]
fn query_without_known_entities_falls_back_to_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let facts = write_facts(tmp.path());
    let idx = tmp.path().join("idx");
    assert!(run(&["ingest", facts.to_str().unwrap(), "--out", idx.to_str().unwrap()]).status.success());

    let out = run(&["query", "--index", idx.to_str().unwrap(), "completely unrelated words", "--k", "1"]);
    assert!(out.status.success());
    let line: serde_json::Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(line["mode"], "baseline", "fallback must be marked");
}

#[test]
fn query_explain_adds_breakdown() {
    let tmp = tempfile::tempdir().unwrap();
    let facts = write_facts(tmp.path());
    let idx = tmp.path().join("idx");
    assert!(run(&["ingest", facts.to_str().unwrap(), "--out", idx.to_str().unwrap()]).status.success());

    let out = run(&["query", "--index", idx.to_str().unwrap(), "about beta", "--k", "1", "--explain", "--entity", "beta"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let line: serde_json::Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    let rows = line["breakdown"].as_array().expect("breakdown rows");
    assert!(!rows.is_empty());
    for r in rows {
        for key in ["semantic", "share", "informativeness", "relevance"] {
            assert!(r[key].is_number(), "missing {key}");
        }
    }
}

#[test]
fn query_unknown_explicit_entity_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let facts = write_facts(tmp.path());
    let idx = tmp.path().join("idx");
    assert!(run(&["ingest", facts.to_str().unwrap(), "--out", idx.to_str().unwrap()]).status.success());

    let out = run(&["query", "--index", idx.to_str().unwrap(), "x", "--entity", "nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown entity"));
}

#[test]
fn stale_incidence_cache_triggers_rebuild_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let facts = write_facts(tmp.path());
    let idx = tmp.path().join("idx");
    assert!(run(&["ingest", facts.to_str().unwrap(), "--out", idx.to_str().unwrap()]).status.success());
    // edit the JSONL behind the cache's back
    let mut jsonl = std::fs::read_to_string(idx.join("facts.jsonl")).unwrap();
    jsonl.push_str("{\"text\":\"delta links alpha\",\"entities\":[\"delta\",\"alpha\"]}\n");
    std::fs::write(idx.join("facts.jsonl"), jsonl).unwrap();

    let out = run(&["query", "--index", idx.to_str().unwrap(), "alpha", "--k", "1"]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("stale"), "{}", stderr(&out));
}

#[test]
fn bad_config_key_and_value_exit_usage() {
    let out = run(&["--set", "no.such.key=1", "train", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));

    let out = run(&["--set", "retrieval.k=notanumber", "train", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["--set", "reward.lambda1=-1", "train", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_exits_usage_and_help_exits_zero() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("ingest"));
}

#[test]
fn config_file_applies_and_set_overrides_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    std::fs::write(
        &cfg,
        "# tiny experiment\ncorpus.n_entities = 30\ncorpus.n_chains = 4\ntrain.iterations = 2\nreward.rollouts_m = 2\n",
    )
    .unwrap();
    let run_dir = tmp.path().join("run");
    let out = run(&[
        "--config", cfg.to_str().unwrap(),
        "--set", "train.iterations=3",
        "train", "--out", run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    // 2 header lines + 3 iterations: the --set override won
    assert_eq!(csv.lines().count(), 5, "{csv}");
    let config_txt = std::fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(config_txt.contains("corpus.n_entities = 30"));
    assert!(config_txt.contains("train.iterations = 3"));
}

#[test]
fn serve_stdio_answers_and_survives_bad_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let facts = write_facts(tmp.path());
    let idx = tmp.path().join("idx");
    assert!(run(&["ingest", facts.to_str().unwrap(), "--out", idx.to_str().unwrap()]).status.success());

    let mut child = cli()
        .args(["serve", "--index", idx.to_str().unwrap(), "--stdio"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(
            concat!(
                r#"{"query":"beta links","k":1,"id":7}"#, "\n",
                "this is not json\n",
                r#"{"query":"gamma","mode":"baseline","k":2}"#, "\n",
            )
            .as_bytes(),
        )
        .unwrap();
    drop(child.stdin.take());
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["id"], 7);
    assert_eq!(lines[0]["facts"].as_array().unwrap().len(), 1);
    assert!(lines[1]["error"].is_string());
    assert_eq!(lines[2]["mode"], "baseline");
}

#[test]
fn train_eval_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let common = [
        "--set", "corpus.n_entities=40",
        "--set", "corpus.n_chains=6",
        "--set", "train.iterations=4",
        "--set", "reward.rollouts_m=2",
    ];
    let run_a = tmp.path().join("s0");
    let run_b = tmp.path().join("s1");
    for (dir, seed) in [(&run_a, "0"), (&run_b, "1")] {
        let mut args: Vec<&str> = common.to_vec();
        let set_seed = format!("train.seed={seed}");
        args.extend(["--set", &set_seed, "train", "--out", dir.to_str().unwrap()]);
        let out = run(&args);
        assert!(out.status.success(), "{}", stderr(&out));
    }

    let csv = std::fs::read_to_string(run_a.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(
        lines.next().unwrap(),
        "iter,mean_outcome,em,f1,mean_turns,kl,clip_frac,wall_ms"
    );

    // eval with the matching config succeeds and prints metrics
    let mut args: Vec<&str> = common.to_vec();
    args.extend(["--set", "train.seed=0", "eval", "--checkpoint"]);
    let ckpt = run_a.join("checkpoint.json");
    args.push(ckpt.to_str().unwrap());
    let out = run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    for key in ["em", "f1", "mean_turns", "n_tasks"] {
        assert!(!metrics[key].is_null(), "missing {key}");
    }

    // eval under a different config refuses with both hashes printed
    let mut args: Vec<&str> = common.to_vec();
    args.extend(["--set", "retrieval.k=5", "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("config hash mismatch"), "{}", stderr(&out));

    // report aggregates the two seeds into one row with mean +/- std
    let table = tmp.path().join("table.csv");
    let out = run(&[
        "report",
        run_a.to_str().unwrap(),
        run_b.to_str().unwrap(),
        "--out", table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("informativeness"), "{text}");
    assert!(text.contains('±'), "two seeds should aggregate: {text}");
    let csv = std::fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("mode,reward,corpus_hash,n_seeds,"));
    assert!(csv.lines().nth(1).unwrap().contains(",2,"), "{csv}");
}

#[test]
fn report_without_dirs_is_usage_and_incomplete_dir_warns() {
    let out = run(&["report"]);
    assert_eq!(out.status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("not_a_run");
    std::fs::create_dir(&empty).unwrap();
    let out = run(&["report", empty.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("incomplete"), "{}", stderr(&out));
}
