//! Black-box tests of the command-line interface: exit codes, file layout,
//! determinism, and the documented input/output formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use batchgemba::gateway::UsageRecord;
use batchgemba::metaeval::{aggregate, CorrelationMode, ExampleRecord, RunRecord};
use batchgemba::pipeline::{read_run_records, write_run_records};

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_batchgemba"))
        .args(args)
        .output()
        .expect("spawn cli binary")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn mock_provider(script: &Path) -> String {
    format!("mock:{}", script.display())
}

#[test]
fn evaluate_writes_run_files_config_and_summary() {
    let out = tempfile::tempdir().unwrap();
    let out_arg = out.path().join("runs");
    let output = run(&[
        "evaluate",
        "--dataset",
        asset("sample64.jsonl").to_str().unwrap(),
        "--provider",
        &mock_provider(&asset("mock_oracle.json")),
        "--batch-sizes",
        "1,4",
        "--out",
        out_arg.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));

    let cell = out_arg.join("mock-oracle").join("plain");
    let bs1 = read_run_records(&cell.join("bs1.jsonl")).unwrap();
    let bs4 = read_run_records(&cell.join("bs4.jsonl")).unwrap();
    assert_eq!(bs1.len(), 64, "one record per single-example batch");
    assert_eq!(bs4.len(), 16);
    assert!(bs1.iter().all(|r| r.batch_size == 1 && !r.compressed));

    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cell.join("run_config.json")).unwrap())
            .unwrap();
    assert_eq!(config["model"], "mock-oracle");
    assert_eq!(config["batch_sizes"], serde_json::json!([1, 4]));
    assert_eq!(config["compress"], serde_json::json!(false));
    assert_eq!(config["seed"], serde_json::json!(0));

    let text = stdout(&output);
    assert!(text.contains("bs1: batches=64 scored=64 malformed=0 pearson=1.000"));
    assert!(text.contains("bs4: batches=16 scored=64 malformed=0 pearson=1.000"));
    assert!(text.contains("usage:"), "missing usage summary: {text}");
}

#[test]
fn evaluate_with_compression_still_recovers_reference_scores() {
    let out = tempfile::tempdir().unwrap();
    let out_arg = out.path().join("runs");
    let output = run(&[
        "evaluate",
        "--dataset",
        asset("sample64.jsonl").to_str().unwrap(),
        "--provider",
        &mock_provider(&asset("mock_oracle.json")),
        "--batch-size",
        "4",
        "--compress",
        "--out",
        out_arg.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));

    let cell = out_arg.join("mock-oracle").join("compressed");
    let records = read_run_records(&cell.join("bs4.jsonl")).unwrap();
    assert!(records.iter().all(|r| r.compressed));
    let rows = aggregate(&records, CorrelationMode::Pooled);
    assert_eq!(rows[0].pearson_r, Some(1.0));

    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cell.join("run_config.json")).unwrap())
            .unwrap();
    assert_eq!(config["compressor"], "random:0.14");
}

#[test]
fn evaluate_transport_failure_exits_one_but_keeps_other_batches() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("flaky.json");
    std::fs::write(
        &script,
        r#"{"seed": 1, "model": "mock-flaky", "fail_first": {"en-de-b0001": 99}}"#,
    )
    .unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"retry": {"max_attempts": 1, "base_delay_ms": 1, "max_delay_ms": 1}}"#,
    )
    .unwrap();

    let out_arg = dir.path().join("runs");
    let output = run(&[
        "evaluate",
        "--dataset",
        asset("sample64.jsonl").to_str().unwrap(),
        "--provider",
        &mock_provider(&script),
        "--batch-size",
        "4",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_arg.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("en-de-b0001"), "stderr: {}", stderr(&output));

    let records =
        read_run_records(&out_arg.join("mock-flaky").join("plain").join("bs4.jsonl")).unwrap();
    assert_eq!(records.len(), 15, "the 15 healthy batches are persisted");
}

#[test]
fn usage_errors_exit_two() {
    let dataset = asset("sample64.jsonl");
    let dataset = dataset.to_str().unwrap();
    let mock = mock_provider(&asset("mock_oracle.json"));

    let cases: Vec<(&str, Vec<&str>)> = vec![
        (
            "unknown provider",
            vec!["evaluate", "--dataset", dataset, "--provider", "ftp:host"],
        ),
        (
            "duplicate batch sizes",
            vec![
                "evaluate", "--dataset", dataset, "--provider", &mock, "--batch-sizes", "4,4",
            ],
        ),
        (
            "bad compressor ratio",
            vec![
                "evaluate", "--dataset", dataset, "--provider", &mock, "--compress",
                "--compressor", "random:1.5",
            ],
        ),
        (
            "http without url",
            vec!["evaluate", "--dataset", dataset, "--provider", "http"],
        ),
        (
            "missing dataset file",
            vec!["evaluate", "--dataset", "/nonexistent/data.jsonl", "--provider", &mock],
        ),
    ];
    for (label, args) in cases {
        let output = run(&args);
        assert_eq!(output.status.code(), Some(2), "{label}");
        assert!(stderr(&output).contains("error"), "{label}: {}", stderr(&output));
    }

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"batch_size": 4}"#).unwrap();
    let output = run(&[
        "evaluate",
        "--dataset",
        dataset,
        "--provider",
        &mock,
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "unknown config field is rejected");
}

#[test]
fn gen_stage1_is_deterministic_and_respects_configured_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"stage1": {"ratio_min": 0.2, "ratio_max": 0.3, "batch_size_min": 2, "batch_size_max": 3}}"#,
    )
    .unwrap();

    let mut outputs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = dir.path().join(name);
        let output = run(&[
            "gen-stage1",
            "--dataset",
            asset("sample64.jsonl").to_str().unwrap(),
            "--count",
            "40",
            "--seed",
            "9",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "stderr: {}", stderr(&output));
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "same seed must give identical bytes");

    let text = String::from_utf8(outputs[0].clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 40);
    for line in lines {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let ratio = record["meta"]["ratio"].as_f64().unwrap();
        let batch_size = record["meta"]["batch_size"].as_u64().unwrap();
        assert!((0.2..0.3).contains(&ratio), "ratio {ratio}");
        assert!((2..=3).contains(&batch_size), "batch size {batch_size}");
        assert!(record["messages"].as_array().unwrap().len() == 2);
    }
}

#[test]
fn gen_pairs_writes_preference_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pairs.jsonl");
    let output = run(&[
        "gen-pairs",
        "--dataset",
        asset("sample64.jsonl").to_str().unwrap(),
        "--provider",
        &mock_provider(&asset("mock_oracle.json")),
        "--count",
        "5",
        "--candidates",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(stdout(&output).contains("pairs"), "summary line: {}", stdout(&output));

    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for line in lines {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(!record["prompt"].as_str().unwrap().is_empty());
        assert_ne!(record["chosen"], record["rejected"]);
        let meta = &record["meta"];
        assert!(meta["quality_chosen"].as_f64().unwrap()
            >= meta["quality_rejected"].as_f64().unwrap());
        assert_eq!(meta["candidates"], serde_json::json!(4));
        assert!(meta["batch_id"].as_str().unwrap().starts_with("pairs-"));
        let batch_size = meta["batch_size"].as_u64().unwrap();
        assert!((2..=8).contains(&batch_size));
    }
}

#[test]
fn token_audit_reports_compression_as_smaller_segments() {
    let dataset = asset("sample64.jsonl");

    let plain = run(&[
        "token-audit",
        "--dataset",
        dataset.to_str().unwrap(),
        "--batch-size",
        "4",
        "--format",
        "csv",
    ]);
    assert!(plain.status.success());
    let compressed = run(&[
        "token-audit",
        "--dataset",
        dataset.to_str().unwrap(),
        "--batch-size",
        "4",
        "--compress",
        "--format",
        "csv",
    ]);
    assert!(compressed.status.success());

    let segment_tokens = |output: &Output| -> f64 {
        stdout(output)
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .nth(4)
            .unwrap()
            .parse()
            .unwrap()
    };
    let plain_tokens = segment_tokens(&plain);
    let compressed_tokens = segment_tokens(&compressed);
    let reduction = (plain_tokens - compressed_tokens) / plain_tokens;
    // Default ratio 0.14, slightly under on annotated segments because
    // span tokens are protected.
    assert!(
        (0.11..=0.15).contains(&reduction),
        "segment reduction {reduction:.4} outside [0.11, 0.15]"
    );

    let table = run(&[
        "token-audit",
        "--dataset",
        dataset.to_str().unwrap(),
    ]);
    assert!(table.status.success());
    let text = stdout(&table);
    assert!(text.contains("ratio_vs_bs1"), "table header: {text}");
    assert!(text.lines().count() >= 6, "five default batch sizes plus header");

    let remote = run(&[
        "token-audit",
        "--dataset",
        dataset.to_str().unwrap(),
        "--compress",
        "--compressor",
        "model:mini",
    ]);
    assert_eq!(remote.status.code(), Some(2), "model compressors need a network");
}

fn report_fixture_record(batch_size: usize, offset: f64) -> RunRecord {
    let examples = (0..4)
        .map(|i| ExampleRecord {
            id: format!("e{i}"),
            human_score: -(i as f64),
            llm_score: Some(-(i as f64) * 0.9 + offset),
            malformed: false,
        })
        .collect();
    RunRecord {
        model_id: "demo".into(),
        compressed: false,
        batch_size,
        lang_pair: ("en".into(), "de".into()),
        examples,
        usage: UsageRecord {
            prompt_tokens: 500,
            completion_tokens: 50,
            locally_counted: true,
        },
    }
}

#[test]
fn report_formats_artifacts_and_baseline_selection() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let records: Vec<RunRecord> = [1usize, 2, 4]
        .iter()
        .map(|&bs| report_fixture_record(bs, 0.1 * bs as f64))
        .collect();
    write_run_records(&runs.join("demo.jsonl"), &records).unwrap();

    let report_out = dir.path().join("report");
    let output = run(&[
        "report",
        runs.to_str().unwrap(),
        "--baseline-batch-size",
        "2",
        "--format",
        "csv",
        "--out",
        report_out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(stdout(&output).starts_with("model,compression,batch_size,pearson"));

    for artifact in [
        "rows.csv",
        "rows.jsonl",
        "correlation.csv",
        "token_usage.csv",
        "error_rate.csv",
        "degradation.csv",
    ] {
        assert!(report_out.join(artifact).exists(), "missing {artifact}");
    }

    let degradation = std::fs::read_to_string(report_out.join("degradation.csv")).unwrap();
    let baseline_row = degradation
        .lines()
        .find(|l| l.starts_with("demo,plain,2,"))
        .expect("baseline row present");
    assert!(
        baseline_row.ends_with("1.000000"),
        "baseline must be exactly 1.0: {baseline_row}"
    );

    let table = run(&["report", runs.to_str().unwrap(), "--out", report_out.to_str().unwrap()]);
    assert!(table.status.success());
    assert!(stdout(&table).contains("pearson"), "table output: {}", stdout(&table));

    let missing = run(&["report", "/nonexistent/runs"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn import_wmt_roundtrip_feeds_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("judgments.tsv");
    std::fs::write(
        &tsv,
        "system\tseg_id\tsrc_lang\ttgt_lang\tsource\ttarget\tcategory\tseverity\n\
         sysA\t1\ten\tde\tThe cat sat quietly.\tDie <v>Katze</v> sass leise.\taccuracy/mistranslation\tmajor\n\
         sysA\t1\ten\tde\tThe cat sat quietly.\tDie Katze <v>sass</v> leise.\tfluency/spelling\tminor\n\
         sysA\t2\ten\tde\tIt rained all day.\tEs regnete den ganzen Tag.\tno-error\tno-error\n\
         sysB\t1\ten\tde\tThe cat sat quietly.\tKatze sitzt.\taccuracy/omission\tcatastrophic\n",
    )
    .unwrap();

    let imported = dir.path().join("imported.jsonl");
    let output = run(&[
        "import-wmt",
        tsv.to_str().unwrap(),
        "--out",
        imported.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(stdout(&output).contains("imported 3 segments"), "{}", stdout(&output));
    assert!(
        stderr(&output).contains("severity"),
        "bad severity row should leave a note: {}",
        stderr(&output)
    );

    let text = std::fs::read_to_string(&imported).unwrap();
    let scored: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(scored.len(), 3);
    assert_eq!(scored[0]["id"], "sysA:en-de:1");
    assert_eq!(scored[0]["human_score"], serde_json::json!(-6.0));
    assert_eq!(scored[1]["human_score"], serde_json::json!(0.0));

    let out_arg = dir.path().join("runs");
    let eval = run(&[
        "evaluate",
        "--dataset",
        imported.to_str().unwrap(),
        "--provider",
        &mock_provider(&asset("mock_oracle.json")),
        "--batch-size",
        "1",
        "--out",
        out_arg.to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "stderr: {}", stderr(&eval));
    let records =
        read_run_records(&out_arg.join("mock-oracle").join("plain").join("bs1.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    for record in &records {
        for example in &record.examples {
            assert_eq!(example.llm_score, Some(example.human_score));
        }
    }
}
