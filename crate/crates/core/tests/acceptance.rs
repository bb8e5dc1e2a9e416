//! End-to-end acceptance checks. Each test verifies one shipped guarantee
//! at its stated tolerance and prints a single summary line; run with
//! `cargo test --test acceptance -- --nocapture` to see the numbers.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use batchgemba::compression::{
    generate_stage1, random_compress, select_pair, CompressionCandidate, CompressionConfig,
};
use batchgemba::dataset::{load_dataset, Dataset, EvalBatch};
use batchgemba::gateway::mock::{MalformKind, MalformSpec, MockBackend, MockMode, MockScript};
use batchgemba::gateway::{Backend, CompletionRequest, UsageRecord};
use batchgemba::metaeval::{aggregate, pearson, CorrelationMode, ExampleRecord, RunRecord};
use batchgemba::mqm::{ErrorSpan, Severity, Side, TranslationExample};
use batchgemba::parser::parse_batch_response;
use batchgemba::pipeline::{read_run_records, write_run_records};
use batchgemba::prompt::{schema_for, PromptTemplate};
use batchgemba::tokenizer::{RuleTokenizer, Tokenizer};

struct Criterion {
    name: &'static str,
    failures: Vec<String>,
    started: Instant,
}

impl Criterion {
    fn new(name: &'static str) -> Self {
        Criterion {
            name,
            failures: Vec::new(),
            started: Instant::now(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn elapsed_secs(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn finish(self, detail: String) {
        if self.failures.is_empty() {
            println!("[PASS] {}: {detail}", self.name);
        } else {
            let notes = self.failures.join(" | ");
            println!("[FAIL] {}: {notes}", self.name);
            panic!("{} failed: {notes}", self.name);
        }
    }
}

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn sample_dataset() -> Dataset {
    let report = load_dataset(&asset("sample64.jsonl")).expect("bundled dataset");
    assert!(report.diagnostics.is_empty());
    report.dataset
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_batchgemba"))
        .args(args)
        .output()
        .expect("spawn cli binary")
}

/// Parses CSV produced by the CLI (fields never contain commas or quotes).
fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn token_amortization_within_published_band() {
    let mut c = Criterion::new("token amortization on the bundled dataset");
    let dataset = asset("sample64.jsonl");

    let output = run_cli(&[
        "token-audit",
        "--dataset",
        dataset.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    c.check(
        output.status.success(),
        format!("token-audit exited with {:?}", output.status.code()),
    );

    let stdout = String::from_utf8(output.stdout).unwrap();
    let mut ratios: BTreeMap<usize, f64> = BTreeMap::new();
    for row in parse_csv(&stdout) {
        let bs: usize = row[0].parse().unwrap();
        let ratio: f64 = row[5].parse().unwrap();
        ratios.insert(bs, ratio);
    }
    c.check(
        ratios.keys().copied().collect::<Vec<_>>() == vec![1, 2, 4, 8, 16],
        format!("unexpected batch sizes: {:?}", ratios.keys().collect::<Vec<_>>()),
    );

    let r4 = ratios.get(&4).copied().unwrap_or(f64::NAN);
    let r16 = ratios.get(&16).copied().unwrap_or(f64::NAN);
    c.check(
        (2.0..=3.0).contains(&r4),
        format!("bs1/bs4 ratio {r4} outside [2.0, 3.0]"),
    );
    c.check(r16 >= 4.0, format!("bs1/bs16 ratio {r16} below 4.0"));

    let secs = c.elapsed_secs();
    c.check(secs < 10.0, format!("audit took {secs:.1}s, budget 10s"));
    c.finish(format!(
        "bs1/bs4 = {r4:.3} in [2.0, 3.0]; bs1/bs16 = {r16:.3} >= 4.0; {secs:.2}s"
    ));
}

fn synthetic_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..=8);
    (0..len)
        .map(|_| (b'a' + rng.random_range(0..26)) as char)
        .collect()
}

fn synthetic_segment(rng: &mut ChaCha8Rng, tokens: usize) -> String {
    (0..tokens)
        .map(|_| synthetic_word(rng))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn random_compression_tracks_requested_ratio_per_segment() {
    let mut c = Criterion::new("compression reduction per unannotated segment");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e6_0001);
    let mut worst: f64 = 0.0;
    let cases = 1000;

    for case in 0..cases {
        let ratio = if case % 2 == 0 { 0.14 } else { 0.50 };
        let source_tokens = rng.random_range(50..=120);
        let target_tokens = rng.random_range(50..=120);
        let example = TranslationExample {
            id: format!("case-{case}"),
            source_lang: "en".into(),
            target_lang: "de".into(),
            source_text: synthetic_segment(&mut rng, source_tokens),
            target_text: synthetic_segment(&mut rng, target_tokens),
            human_score: None,
            spans: Vec::new(),
        };
        let batch = EvalBatch::new(format!("case-{case}"), vec![example]).unwrap();
        let candidate = random_compress(&batch, ratio, rng.random()).unwrap();
        let (source, target) = &candidate.compressed_examples[0];

        for (original, compressed) in [(source_tokens, source), (target_tokens, target)] {
            let kept = RuleTokenizer.count(compressed);
            let reduction = (original - kept) as f64 / original as f64;
            let deviation = (reduction - ratio).abs();
            worst = worst.max(deviation);
            if deviation > 0.02 && c.failures.len() < 3 {
                c.check(
                    false,
                    format!("case {case}: requested {ratio}, measured {reduction:.4}"),
                );
            }
        }
    }

    let secs = c.elapsed_secs();
    c.check(secs < 30.0, format!("run took {secs:.1}s, budget 30s"));
    c.finish(format!(
        "{cases} segments at r in {{0.14, 0.50}}; worst |measured - requested| = {worst:.4} <= 0.02; {secs:.2}s"
    ));
}

/// A segment of globally unique tokens, with each token's char interval.
fn unique_token_segment(prefix: char, count: usize) -> (String, Vec<(usize, usize)>) {
    let mut text = String::new();
    let mut ranges = Vec::with_capacity(count);
    let mut pos = 0;
    for j in 0..count {
        if j > 0 {
            text.push(' ');
            pos += 1;
        }
        let token = format!("{prefix}{j:03}");
        ranges.push((pos, pos + token.len()));
        text.push_str(&token);
        pos += token.len();
    }
    (text, ranges)
}

#[test]
fn span_protected_tokens_survive_compression() {
    let mut c = Criterion::new("span preservation under seeded compression");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e6_0002);
    let severities = [Severity::Minor, Severity::Major, Severity::Critical];
    let cases = 1000;
    let mut spans_checked = 0usize;
    let mut violations = 0usize;

    for case in 0..cases {
        let batch_size = rng.random_range(2..=6);
        let mut examples = Vec::with_capacity(batch_size);
        let mut token_ranges = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let (source_text, source_ranges) =
                unique_token_segment('s', rng.random_range(20..=60));
            let (target_text, target_ranges) =
                unique_token_segment('t', rng.random_range(20..=60));
            let mut spans = Vec::new();
            for _ in 0..rng.random_range(0..=3) {
                let (side, ranges) = if rng.random_bool(0.5) {
                    (Side::Source, &source_ranges)
                } else {
                    (Side::Target, &target_ranges)
                };
                let first = rng.random_range(0..ranges.len());
                let last = (first + rng.random_range(0..4)).min(ranges.len() - 1);
                spans.push(ErrorSpan {
                    side,
                    start_char: ranges[first].0,
                    end_char: ranges[last].1,
                    severity: severities[spans_checked % severities.len()],
                    category: "other".into(),
                });
            }
            spans_checked += spans.len();
            examples.push(TranslationExample {
                id: format!("case{case}-ex{i}"),
                source_lang: "xx".into(),
                target_lang: "yy".into(),
                source_text,
                target_text,
                human_score: None,
                spans,
            });
            token_ranges.push((source_ranges, target_ranges));
        }

        let batch = EvalBatch::new(format!("case-{case}"), examples).unwrap();
        let ratio = [0.14, 0.5, 0.8][case % 3];
        let candidate = random_compress(&batch, ratio, rng.random()).unwrap();

        for (i, example) in batch.examples.iter().enumerate() {
            let (compressed_source, compressed_target) = &candidate.compressed_examples[i];
            let (source_ranges, target_ranges) = &token_ranges[i];
            for span in &example.spans {
                let (text, kept, ranges) = match span.side {
                    Side::Source => (&example.source_text, compressed_source, source_ranges),
                    Side::Target => (&example.target_text, compressed_target, target_ranges),
                };
                let kept: HashSet<&str> = kept.split_whitespace().collect();
                // Segments are ASCII, so char offsets double as byte offsets.
                for &(start, end) in ranges {
                    let protected = start < span.end_char && span.start_char < end;
                    if protected && !kept.contains(&text[start..end]) {
                        violations += 1;
                    }
                }
            }
        }
    }

    c.check(
        violations == 0,
        format!("{violations} protected tokens were removed"),
    );
    let secs = c.elapsed_secs();
    c.finish(format!(
        "{cases} batch compressions, {spans_checked} spans; protected-token removals = {violations}; {secs:.2}s"
    ));
}

fn random_errors(rng: &mut ChaCha8Rng) -> Value {
    let severities = ["minor", "major", "critical"];
    let categories = ["accuracy/mistranslation", "fluency/grammar", "style", "other"];
    let entries: Vec<Value> = (0..rng.random_range(0..=2))
        .map(|_| {
            json!({
                "severity": severities[rng.random_range(0..severities.len())],
                "category": categories[rng.random_range(0..categories.len())],
                "span": synthetic_word(rng),
            })
        })
        .collect();
    json!(entries)
}

fn valid_payload(rng: &mut ChaCha8Rng, n: usize) -> Value {
    let evaluations: Vec<Value> = (0..n)
        .map(|i| json!({"index": i, "errors": random_errors(rng)}))
        .collect();
    json!({ "evaluations": evaluations })
}

fn mutate_payload(rng: &mut ChaCha8Rng, payload: Value, n: usize) -> String {
    let garbage = [
        "",
        "null",
        "[,]",
        "{\"evaluations\": 3}",
        "I cannot help with that request.",
        "{{{{",
        "\"evaluations\"",
        "[1, 2, 3]",
    ];
    let mut value = payload;
    match rng.random_range(0..10u32) {
        0 => {
            let text = value.to_string();
            let cut = rng.random_range(0..=text.len());
            return text[..cut].to_string();
        }
        1 => {
            return format!(
                "Sure, here are the evaluations:\n{}\nLet me know if anything is unclear.",
                value
            );
        }
        2 => {
            let entries = value["evaluations"].as_array_mut().unwrap();
            let victim = rng.random_range(0..entries.len());
            entries.remove(victim);
        }
        3 => {
            let entries = value["evaluations"].as_array_mut().unwrap();
            let victim = entries[rng.random_range(0..entries.len())].clone();
            entries.push(victim);
        }
        4 => {
            let entries = value["evaluations"].as_array_mut().unwrap();
            let victim = rng.random_range(0..entries.len());
            entries[victim]["errors"] = json!(42);
        }
        5 => return garbage[rng.random_range(0..garbage.len())].to_string(),
        6 => {
            let entries = value["evaluations"].as_array_mut().unwrap();
            let victim = rng.random_range(0..entries.len());
            entries[victim]["index"] = json!(n + rng.random_range(0..3usize));
        }
        7 => {
            let entries = value["evaluations"].as_array_mut().unwrap();
            let victim = rng.random_range(0..entries.len());
            entries[victim]["errors"] =
                json!([{"severity": "huge", "category": "style", "span": "x"}]);
        }
        8 => {
            let text = value.to_string();
            return text[..text.len() - 1].to_string();
        }
        _ => {}
    }
    value.to_string()
}

#[tokio::test]
async fn parser_always_conserves_batch_size_and_attributes_exact_corruption() {
    let mut c = Criterion::new("parser conservation and exact attribution");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e6_0003);
    let fuzz_cases = 10_000;
    let mut conservation_violations = 0usize;

    for _ in 0..fuzz_cases {
        let n = rng.random_range(1..=8);
        let schema = schema_for(n).unwrap();
        let payload = valid_payload(&mut rng, n);
        let text = mutate_payload(&mut rng, payload, n);
        let parsed = parse_batch_response(&text, &schema);
        if parsed.outcomes.len() != n {
            conservation_violations += 1;
            if c.failures.len() < 3 {
                c.check(
                    false,
                    format!("{} outcomes for batch size {n}: {text:.60}", parsed.outcomes.len()),
                );
            }
        }
    }
    c.check(
        conservation_violations == 0,
        format!("{conservation_violations} fuzz cases broke conservation"),
    );

    // Scripted corruption of exactly round(rate * n) examples must be
    // attributed example-by-example, never smeared across the batch.
    let dataset = sample_dataset();
    let by_pair = dataset.by_lang_pair();
    let ende: Vec<TranslationExample> = by_pair[&("en".to_string(), "de".to_string())]
        .iter()
        .map(|&e| e.clone())
        .collect();

    let mut attribution_checks = 0usize;
    for kind in [
        MalformKind::DropIndex,
        MalformKind::DuplicateIndex,
        MalformKind::BadErrorObject,
    ] {
        for rate in [0.25, 0.5] {
            for n in [4usize, 8, 16] {
                let batch = EvalBatch::new("probe", ende[..n].to_vec()).unwrap();
                let backend = MockBackend::new(MockScript {
                    seed: 11 + n as u64,
                    model: "mock-sabotage".into(),
                    default_mode: MockMode::Oracle,
                    verbatim: BTreeMap::new(),
                    fail_first: BTreeMap::new(),
                    malform: Some(MalformSpec { kind, rate }),
                    report_usage: true,
                    latency_ms: 0,
                });
                backend.observe_batch("probe", &batch);
                let request = CompletionRequest {
                    tag: "probe".into(),
                    messages: Vec::new(),
                    model: "mock-sabotage".into(),
                    temperature: 0.0,
                    max_tokens: 512,
                    schema: None,
                };
                let response = backend.complete(&request).await.unwrap();
                let parsed = parse_batch_response(&response.text, &schema_for(n).unwrap());
                let expected = (rate * n as f64).round() as usize;
                attribution_checks += 1;
                c.check(
                    parsed.outcomes.len() == n,
                    format!("{kind:?} rate {rate} n {n}: {} outcomes", parsed.outcomes.len()),
                );
                c.check(
                    parsed.malformed_count() == expected,
                    format!(
                        "{kind:?} rate {rate} n {n}: {} malformed, expected exactly {expected}",
                        parsed.malformed_count()
                    ),
                );
            }
        }
    }

    let secs = c.elapsed_secs();
    c.finish(format!(
        "{fuzz_cases} fuzzed responses conserved batch size; {attribution_checks} scripted corruptions attributed exactly; {secs:.2}s"
    ));
}

fn brute_force_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

#[test]
fn pearson_agrees_with_brute_force_reference() {
    let mut c = Criterion::new("pearson against brute-force reference");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e6_0004);
    let mut worst: f64 = 0.0;

    for case in 0..100 {
        let len = rng.random_range(3..=40);
        let xs: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let ys: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let got = pearson(&xs, &ys).unwrap();
        let want = brute_force_pearson(&xs, &ys);
        let deviation = (got - want).abs();
        worst = worst.max(deviation);
        c.check(
            deviation <= 1e-12,
            format!("case {case} (len {len}): |{got} - {want}| = {deviation:e}"),
        );
    }

    let fixture = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
    c.check(
        (fixture - 0.98198).abs() <= 1e-5,
        format!("fixture correlation {fixture} not within 1e-5 of 0.98198"),
    );

    c.finish(format!(
        "100 random vectors, worst deviation {worst:.2e} <= 1e-12; fixture = {fixture:.6}"
    ));
}

#[test]
fn hermetic_evaluate_recovers_oracle_scores_and_injected_error_rate() {
    let mut c = Criterion::new("hermetic evaluate round trip");
    let dataset = asset("sample64.jsonl");
    let out = tempfile::tempdir().unwrap();
    let oracle_out = out.path().join("oracle");
    let malform_out = out.path().join("malform");

    let oracle_script = asset("mock_oracle.json");
    let output = run_cli(&[
        "evaluate",
        "--dataset",
        dataset.to_str().unwrap(),
        "--provider",
        &format!("mock:{}", oracle_script.display()),
        "--batch-sizes",
        "1,2,4,8,16",
        "--out",
        oracle_out.to_str().unwrap(),
    ]);
    c.check(
        output.status.success(),
        format!(
            "oracle evaluate exited {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        ),
    );

    let mut records = Vec::new();
    for bs in [1usize, 2, 4, 8, 16] {
        let path = oracle_out
            .join("mock-oracle")
            .join("plain")
            .join(format!("bs{bs}.jsonl"));
        match read_run_records(&path) {
            Ok(mut batch) => records.append(&mut batch),
            Err(error) => c.check(false, format!("bs{bs} records unreadable: {error}")),
        }
    }
    let rows = aggregate(&records, CorrelationMode::Pooled);
    c.check(rows.len() == 5, format!("{} rows, expected 5", rows.len()));
    for row in &rows {
        c.check(
            row.pearson_r == Some(1.0),
            format!("bs{}: pearson {:?}, expected exactly 1.0", row.batch_size, row.pearson_r),
        );
        c.check(
            row.error_rate == 0.0,
            format!("bs{}: error rate {}, expected 0", row.batch_size, row.error_rate),
        );
        c.check(
            row.n_scored == 64,
            format!("bs{}: {} scored, expected 64", row.batch_size, row.n_scored),
        );
    }

    let malform_script = asset("mock_malform25.json");
    let output = run_cli(&[
        "evaluate",
        "--dataset",
        dataset.to_str().unwrap(),
        "--provider",
        &format!("mock:{}", malform_script.display()),
        "--batch-size",
        "4",
        "--out",
        malform_out.to_str().unwrap(),
    ]);
    c.check(
        output.status.success(),
        format!(
            "malform evaluate exited {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        ),
    );

    let path = malform_out
        .join("mock-malform")
        .join("plain")
        .join("bs4.jsonl");
    let malform_rows = match read_run_records(&path) {
        Ok(records) => aggregate(&records, CorrelationMode::Pooled),
        Err(error) => {
            c.check(false, format!("malform records unreadable: {error}"));
            Vec::new()
        }
    };
    let mut observed_rate = f64::NAN;
    if let Some(row) = malform_rows.first() {
        observed_rate = row.error_rate;
        c.check(
            row.error_rate == 0.25,
            format!("error rate {}, expected exactly 0.25", row.error_rate),
        );
        c.check(
            row.pearson_r == Some(1.0),
            format!("surviving examples drifted: pearson {:?}", row.pearson_r),
        );
        c.check(
            row.n_scored == 48,
            format!("{} scored, expected 48 of 64", row.n_scored),
        );
    } else {
        c.check(false, "no aggregated row for the malform run".to_string());
    }

    let secs = c.elapsed_secs();
    c.check(secs < 60.0, format!("round trip took {secs:.1}s, budget 60s"));
    c.finish(format!(
        "oracle r = 1.0 and error rate 0 at bs {{1,2,4,8,16}}; scripted drops gave error rate {observed_rate} at bs 4; {secs:.2}s"
    ));
}

/// Three example records whose llm/human correlation is `r` to ~1e-15:
/// humans are [-1, 0, 1]; llm adds an orthogonal zero-mean component scaled
/// so the normalized covariance lands exactly on `r`.
fn exact_r_examples(r: f64) -> Vec<ExampleRecord> {
    let xs = [-1.0, 0.0, 1.0];
    let zs = [1.0, -2.0, 1.0];
    let c = ((1.0 - r * r) / 3.0).sqrt();
    xs.iter()
        .zip(zs)
        .enumerate()
        .map(|(i, (x, z))| ExampleRecord {
            id: format!("e{i}"),
            human_score: *x,
            llm_score: Some(r * x + c * z),
            malformed: false,
        })
        .collect()
}

fn fixture_run(model: &str, compressed: bool, batch_size: usize, r: f64) -> RunRecord {
    RunRecord {
        model_id: model.into(),
        compressed,
        batch_size,
        lang_pair: ("en".into(), "de".into()),
        examples: exact_r_examples(r),
        usage: UsageRecord {
            prompt_tokens: 1000 / batch_size as u64 + 120,
            completion_tokens: 90,
            locally_counted: true,
        },
    }
}

#[test]
fn report_degradation_matches_reference_correlations() {
    let mut c = Criterion::new("report degradation on reference correlations");
    let batch_sizes = [1usize, 2, 4, 8, 16];
    let plain = [0.613, 0.340, 0.384, 0.269, 0.015];
    let compressed = [0.603, 0.498, 0.548, 0.189, 0.028];

    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let plain_records: Vec<RunRecord> = batch_sizes
        .iter()
        .zip(plain)
        .map(|(&bs, r)| fixture_run("gpt-4o", false, bs, r))
        .collect();
    let compressed_records: Vec<RunRecord> = batch_sizes
        .iter()
        .zip(compressed)
        .map(|(&bs, r)| fixture_run("gpt-4o", true, bs, r))
        .collect();
    write_run_records(&runs.join("plain.jsonl"), &plain_records).unwrap();
    write_run_records(&runs.join("compressed.jsonl"), &compressed_records).unwrap();

    let report_out = dir.path().join("report");
    let output = run_cli(&[
        "report",
        runs.to_str().unwrap(),
        "--out",
        report_out.to_str().unwrap(),
    ]);
    c.check(
        output.status.success(),
        format!(
            "report exited {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        ),
    );

    let csv = std::fs::read_to_string(report_out.join("degradation.csv")).unwrap_or_default();
    let mut ratios: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for row in parse_csv(&csv) {
        ratios.insert(
            (row[1].clone(), row[2].parse().unwrap()),
            row[3].parse().unwrap(),
        );
    }
    c.check(
        ratios.len() == 10,
        format!("{} degradation rows, expected 10", ratios.len()),
    );

    for (label, correlations) in [("plain", plain), ("compressed", compressed)] {
        for (&bs, r) in batch_sizes.iter().zip(correlations) {
            let expected = r / correlations[0];
            let got = ratios
                .get(&(label.to_string(), bs))
                .copied()
                .unwrap_or(f64::NAN);
            c.check(
                (got - expected).abs() <= 1e-3,
                format!("{label} bs{bs}: ratio {got}, expected {expected:.6}"),
            );
        }
    }

    let headline = ratios.get(&("plain".into(), 2)).copied().unwrap_or(f64::NAN);
    c.check(
        (headline - 0.555).abs() <= 1e-3,
        format!("plain bs2 ratio {headline}, expected 0.555 +/- 1e-3"),
    );
    let retained = ratios
        .get(&("compressed".into(), 4))
        .copied()
        .unwrap_or(f64::NAN);
    c.check(
        retained > 0.90,
        format!("compressed bs4 ratio {retained}, expected > 0.90"),
    );

    c.finish(format!(
        "all 10 ratios within 1e-3; plain bs2 = {headline:.3}; compressed bs4 = {retained:.3} > 0.90"
    ));
}

fn tie_candidate(seed: u64, tokens: usize) -> CompressionCandidate {
    CompressionCandidate {
        batch_id: "fixture".into(),
        compressed_examples: vec![("source".into(), "target".into())],
        token_count: tokens,
        achieved_ratio: 0.0,
        format_valid: true,
        generator_seed: seed,
    }
}

#[test]
fn preference_selection_breaks_quality_ties_by_fewest_tokens() {
    let mut c = Criterion::new("preference selection on quality ties");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e6_0005);
    let fixtures = 50;

    for fixture in 0..fixtures {
        let top_quality = -(rng.random_range(1..=20) as f64) / 4.0;
        let tied = rng.random_range(2..=3);
        let mut token_counts: Vec<usize> = Vec::new();
        while token_counts.len() < tied {
            let tokens = rng.random_range(20..=200);
            if !token_counts.contains(&tokens) {
                token_counts.push(tokens);
            }
        }
        let mut scored: Vec<(CompressionCandidate, f64)> = token_counts
            .iter()
            .enumerate()
            .map(|(i, &tokens)| (tie_candidate(100 + i as u64, tokens), top_quality))
            .collect();
        for i in 0..rng.random_range(1..=3usize) {
            let worse = top_quality - 1.0 - i as f64;
            scored.push((tie_candidate(200 + i as u64, rng.random_range(10..=200)), worse));
        }

        let fewest = *token_counts.iter().min().unwrap();
        let baseline = select_pair(&scored).unwrap();
        c.check(
            baseline.quality_chosen == top_quality && baseline.chosen.token_count == fewest,
            format!(
                "fixture {fixture}: chose {} tokens at quality {}, expected {fewest} at {top_quality}",
                baseline.chosen.token_count, baseline.quality_chosen
            ),
        );
        c.check(
            token_counts
                .iter()
                .all(|&t| t == fewest || baseline.chosen.token_count < t),
            format!("fixture {fixture}: chosen is not strictly fewest among ties"),
        );

        for _ in 0..12 {
            let mut shuffled = scored.clone();
            shuffled.shuffle(&mut rng);
            let pair = select_pair(&shuffled).unwrap();
            c.check(
                pair.chosen.generator_seed == baseline.chosen.generator_seed
                    && pair.rejected.generator_seed == baseline.rejected.generator_seed,
                format!("fixture {fixture}: selection changed under permutation"),
            );
        }
    }

    c.finish(format!(
        "{fixtures} tie fixtures x 12 permutations: chosen always the strictly fewest-token candidate"
    ));
}

#[test]
fn stage1_sampling_is_uniform_over_configured_ranges() {
    let mut c = Criterion::new("stage-1 sampling distribution");
    let dataset = sample_dataset();
    let template = PromptTemplate::shipped_default();
    let config = CompressionConfig::default();
    let count = 10_000;

    let generator =
        generate_stage1(&dataset, count, &config, &template.per_example_frame).unwrap();
    let mut ratio_sum = 0.0;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut produced = 0usize;
    for record in generator {
        ratio_sum += record.meta.ratio;
        *histogram.entry(record.meta.batch_size).or_default() += 1;
        produced += 1;
        c.check(
            (config.ratio_min..config.ratio_max).contains(&record.meta.ratio)
                || record.meta.ratio == config.ratio_min,
            format!("ratio {} outside configured range", record.meta.ratio),
        );
    }
    c.check(produced == count, format!("{produced} records, expected {count}"));

    let mean = ratio_sum / produced as f64;
    c.check(
        (0.34..=0.37).contains(&mean),
        format!("ratio mean {mean:.4} outside [0.34, 0.37]"),
    );

    let sizes: Vec<usize> = histogram.keys().copied().collect();
    c.check(
        sizes == vec![2, 3, 4, 5, 6, 7, 8],
        format!("batch sizes {sizes:?}, expected 2..=8"),
    );
    let uniform = 1.0 / 7.0;
    let mut worst_share_error: f64 = 0.0;
    for (&size, &n) in &histogram {
        let share = n as f64 / produced as f64;
        worst_share_error = worst_share_error.max((share - uniform).abs());
        c.check(
            (share - uniform).abs() <= 0.03,
            format!("batch size {size}: share {share:.4} deviates from uniform by > 0.03"),
        );
    }

    c.finish(format!(
        "{count} records: ratio mean {mean:.4} in [0.34, 0.37]; worst size-share deviation {worst_share_error:.4} <= 0.03"
    ));
}
