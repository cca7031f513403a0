use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn factprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factprobe"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 120 imported QA pairs and a 12-pair demonstration pool.
fn qa_files(dir: &Path) -> (String, String) {
    let mut qa = String::new();
    for i in 0..120 {
        writeln!(
            qa,
            "Which code belongs to record {i:04}?\tcode {i:04}\tC-{i:04}"
        )
        .unwrap();
    }
    let mut pool = String::new();
    for i in 0..12 {
        writeln!(pool, "Demo question {i:02}?\tdemo {i:02}").unwrap();
    }
    let q = dir.join("qa.tsv");
    let p = dir.join("pool.tsv");
    std::fs::write(&q, qa).unwrap();
    std::fs::write(&p, pool).unwrap();
    (q.display().to_string(), p.display().to_string())
}

fn base_args<'a>(work: &'a str, qa: &'a str, pool: &'a str) -> Vec<&'a str> {
    vec![
        "--work-dir",
        work,
        "--qa",
        qa,
        "--few-shot-pool",
        pool,
        "--prompt-sets",
        "4",
        "--shots",
        "3",
        "--seeds",
        "0,1",
        "--n-unknown",
        "5",
    ]
}

#[test]
fn pipeline_then_verify_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let (qa, pool) = qa_files(dir.path());
    let work = dir.path().join("work").display().to_string();
    let mut args = vec!["pipeline"];
    args.extend(base_args(&work, &qa, &pool));
    let out = factprobe(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for stage in [
        "ingest",
        "generate",
        "probe",
        "categorize",
        "mix",
        "train-handoff",
        "analyze",
        "report",
    ] {
        assert!(
            text.contains(&format!("{stage}: ")),
            "{stage} missing from\n{text}"
        );
    }
    assert!(Path::new(&work).join("report/figure_data.csv").exists());

    let ok = factprobe(&["verify", "--work-dir", &work]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("chain intact"));

    std::fs::write(Path::new(&work).join("seed-1/trends.csv"), "x\n").unwrap();
    let bad = factprobe(&["verify", "--work-dir", &work]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("seed-1/trends.csv: modified"));
}

#[test]
fn stale_upstream_exits_one_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let (qa, pool) = qa_files(dir.path());
    let work = dir.path().join("work").display().to_string();
    for stage in ["ingest", "generate", "probe"] {
        let mut args = vec![stage];
        args.extend(base_args(&work, &qa, &pool));
        assert!(factprobe(&args).status.success());
    }
    let mut args = vec!["analyze"];
    args.extend(base_args(&work, &qa, &pool));
    let out = factprobe(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("factprobe categorize"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn missing_token_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (qa, pool) = qa_files(dir.path());
    let work = dir.path().join("work").display().to_string();
    let mut args = base_args(&work, &qa, &pool);
    for stage in ["ingest", "generate"] {
        let mut a = vec![stage];
        a.extend(args.clone());
        assert!(factprobe(&a).status.success());
    }
    args.extend([
        "--base-url",
        "http://127.0.0.1:9/v1",
        "--model-id",
        "m",
        "--auth-env",
        "FACTPROBE_CLI_TEST_UNSET_TOKEN",
    ]);
    let mut a = vec!["probe"];
    a.extend(args);
    let out = factprobe(&a);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"prompt_sets": 6, "mixture": {"n_unknown": 5}}"#).unwrap();
    let out = factprobe(&[
        "config",
        "--config",
        cfg.to_str().unwrap(),
        "--n-unknown",
        "7",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["mixture"]["n_unknown"], 7);
    assert_eq!(v["prompt_sets"], 6);
    assert_eq!(v["shots"], 4);
}

#[test]
fn inconsistent_mixture_exits_one() {
    let out = factprobe(&["config", "--aug-mode", "none", "--k-aug", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn paraphrase_subcommand_writes_store() {
    let dir = tempfile::tempdir().unwrap();
    let (qa, pool) = qa_files(dir.path());
    let work = dir.path().join("work").display().to_string();
    for stage in ["ingest", "generate"] {
        let mut a = vec![stage];
        a.extend(base_args(&work, &qa, &pool));
        assert!(factprobe(&a).status.success());
    }
    let facts = Path::new(&work)
        .join("generate/facts.jsonl")
        .display()
        .to_string();
    let out_path = dir.path().join("para.jsonl").display().to_string();
    let out = factprobe(&[
        "paraphrase",
        "--facts",
        &facts,
        "--out",
        &out_path,
        "--count",
        "5",
        "--limit",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["paraphrases"].as_array().unwrap().len(), 5);
    }
}
