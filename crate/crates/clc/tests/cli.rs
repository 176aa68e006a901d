//! Binary-level tests: subcommand flows and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

use clc::runner::PipelineReport;

fn clc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn demo(dir: &Path) -> clc::fixtures::DemoCorpus {
    clc::fixtures::write_demo_corpus(dir).unwrap()
}

#[test]
fn run_pipeline_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path());
    let a = clc(
        &["run-pipeline", "--config", "config.json", "--out", "a.json"],
        dir.path(),
    );
    let b = clc(
        &["run-pipeline", "--config", "config.json", "--out", "b.json"],
        dir.path(),
    );
    assert_eq!(
        code(&a),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&a.stderr)
    );
    assert_eq!(code(&b), 0);
    let bytes_a = std::fs::read(dir.path().join("a.json")).unwrap();
    let bytes_b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    let report: PipelineReport = serde_json::from_slice(&bytes_a).unwrap();
    assert_eq!(report.repeat_rephrase_set_size, 1);
}

#[test]
fn chunked_and_masked_runs_report_accordingly() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path());
    let out = clc(
        &[
            "run-pipeline",
            "--config",
            "config.json",
            "--chunk-size",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let report: PipelineReport = serde_json::from_slice(&out.stdout).unwrap();
    let pf = report.pf.unwrap();
    assert!(pf.peak_sim_workspace.unwrap() <= 2 * 4);

    let masked = clc(
        &["run-pipeline", "--config", "config.json", "--mask-future"],
        dir.path(),
    );
    assert_eq!(code(&masked), 0);
    let report: PipelineReport = serde_json::from_slice(&masked.stdout).unwrap();
    assert!(report.mask_future);
    let pf = report.pf.unwrap();
    assert_eq!(pf.grad_norms.unwrap()["future"], 0.0);

    let fast = clc(
        &["run-pipeline", "--config", "config.json", "--mode", "fast"],
        dir.path(),
    );
    assert_eq!(code(&fast), 0);
    let report: PipelineReport = serde_json::from_slice(&fast.stdout).unwrap();
    assert!(report.pf.unwrap().grad_norms.is_none());
}

#[test]
fn empty_manifest_exits_5_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = clc(
        &[
            "run-pipeline",
            "--in",
            "empty.jsonl",
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 5);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn unparseable_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{not json}\n").unwrap();
    let out = clc(&["run-pipeline", "--in", "bad.jsonl"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_embedding_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let demo = demo(dir.path());
    std::fs::remove_file(dir.path().join("embeddings/u00.clce")).unwrap();
    let out = clc(
        &["run-pipeline", "--config", "config.json"],
        demo.manifest.parent().unwrap(),
    );
    assert_eq!(
        code(&out),
        4,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn truncated_embedding_exits_3_and_validate_flags_it() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path());
    let emb = dir.path().join("embeddings/u00.clce");
    let mut bytes = std::fs::read(&emb).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&emb, bytes).unwrap();

    let run = clc(&["run-pipeline", "--config", "config.json"], dir.path());
    assert_eq!(
        code(&run),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&run.stderr)
    );

    let validate = clc(&["validate", "--in", "turns.jsonl"], dir.path());
    assert_eq!(code(&validate), 6);
    let diags: serde_json::Value = serde_json::from_slice(&validate.stdout).unwrap();
    assert!(diags
        .as_array()
        .unwrap()
        .iter()
        .any(|d| d["field"] == "embedding_ref"));
}

#[test]
fn validate_clean_fixture_exits_0_with_no_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path());
    let out = clc(&["validate", "--in", "turns.jsonl"], dir.path());
    assert_eq!(code(&out), 0);
    let diags: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(diags.as_array().unwrap().len(), 0);
}

#[test]
fn validate_missing_field_names_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("m.jsonl"),
        "{\"speaker\":\"user\",\"transcript\":\"hello world\"}\n",
    )
    .unwrap();
    let out = clc(&["validate", "--in", "m.jsonl"], dir.path());
    assert_eq!(code(&out), 6);
    let diags: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let first = &diags.as_array().unwrap()[0];
    assert_eq!(first["line"], 1);
    assert_eq!(first["field"], "timestamp_s");
}

#[test]
fn session_detect_inject_flow() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path());
    let built = clc(
        &[
            "build-sessions",
            "--in",
            "turns.jsonl",
            "--out",
            "sessions.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(code(&built), 0);

    let injected = clc(
        &[
            "inject",
            "--config",
            "config.json",
            "--in",
            "sessions.jsonl",
            "--out",
            "injected.jsonl",
            "--seed",
            "7",
        ],
        dir.path(),
    );
    assert_eq!(code(&injected), 0);
    let lines = std::fs::read_to_string(dir.path().join("injected.jsonl")).unwrap();
    assert_eq!(
        lines.lines().count(),
        14,
        "twelve turns plus one insertion pair"
    );

    let detected = clc(
        &[
            "detect",
            "--in",
            "injected.jsonl",
            "--out",
            "detected.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(
        code(&detected),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&detected.stderr)
    );
    let labeled = std::fs::read_to_string(dir.path().join("detected.jsonl")).unwrap();
    let label_lines: Vec<&str> = labeled
        .lines()
        .filter(|l| l.contains("\"labels\""))
        .collect();
    assert_eq!(label_lines.len(), 1);
    assert!(label_lines[0].contains("\"kind\":\"repeat\""));
}

#[test]
fn filter_drops_high_deletion_turns() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("turns.jsonl");
    std::fs::write(
        &manifest,
        concat!(
            "{\"speaker\":\"user\",\"timestamp_s\":0.0,\"transcript\":\"turn on the kitchen lights\",\"hyp_transcripts\":[{\"text\":\"turn lights\",\"score\":-0.1}]}\n",
            "{\"speaker\":\"user\",\"timestamp_s\":9.0,\"transcript\":\"play jazz\",\"hyp_transcripts\":[{\"text\":\"play jazz\",\"score\":-0.1}]}\n",
        ),
    )
    .unwrap();
    let out = clc(
        &["filter", "--in", "turns.jsonl", "--out", "kept.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let kept = std::fs::read_to_string(dir.path().join("kept.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 1);
    assert!(kept.contains("play jazz"));
}

#[test]
fn score_and_compare_flow() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("baseline.jsonl"),
        "{\"ref\":\"a b c d\",\"hyp\":\"a b x y\"}\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("system.jsonl"),
        "{\"ref\":\"a b c d\",\"nbest\":[\"a b c x\",\"a b c d\"]}\n",
    )
    .unwrap();
    let base = clc(
        &["score", "--in", "baseline.jsonl", "--out", "baseline.json"],
        dir.path(),
    );
    assert_eq!(code(&base), 0);
    let sys = clc(
        &["score", "--in", "system.jsonl", "--out", "system.json"],
        dir.path(),
    );
    assert_eq!(code(&sys), 0);

    let sys_report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("system.json")).unwrap())
            .unwrap();
    assert_eq!(sys_report["wer"], 0.25);
    assert_eq!(sys_report["oracle_wer"], 0.0);

    let cmp = clc(&["compare", "baseline.json", "system.json"], dir.path());
    assert_eq!(code(&cmp), 0);
    let report: serde_json::Value = serde_json::from_slice(&cmp.stdout).unwrap();
    // 0.5 -> 0.25 is a 50% relative improvement.
    assert_eq!(report["werr"], 50.0);
}

#[test]
fn grad_check_passes_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = clc(&["grad-check", "--seeds", "3"], dir.path());
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"].as_array().unwrap().len(), 9);
}

#[test]
fn loss_eval_reads_batch_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let vector = |name: &str, data: Vec<f64>| {
        clc::io::write_vector(
            &dir.path().join(name),
            &clc::tensor::Vector::new(data).unwrap(),
        )
        .unwrap();
    };
    vector("c0.clce", vec![1.0, 0.0]);
    vector("c1.clce", vec![0.0, 1.0]);
    std::fs::write(
        dir.path().join("batch.json"),
        "{\"pf\":{\"current\":[\"c0.clce\",\"c1.clce\"],\"past\":[\"c0.clce\",\"c1.clce\"],\"future\":[\"c0.clce\",\"c1.clce\"]}}",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        "{\"loss\":{\"alpha\":1.0,\"beta\":1.0,\"tau\":1.0}}",
    )
    .unwrap();
    let out = clc(
        &["loss-eval", "--in", "batch.json", "--config", "cfg.json"],
        dir.path(),
    );
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let loss = report["pf"]["loss"].as_f64().unwrap();
    assert!((loss - 0.6265233750364456).abs() < 1e-12);
}
