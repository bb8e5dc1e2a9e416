//! Command-line entry points: argument parsing, configuration layering
//! (flags over config file over defaults), and the subcommand drivers.
//!
//! Exit codes: 0 on success, 1 when transport failures left partial results
//! behind, 2 for configuration and usage errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::compression::{
    self, filter_valid, generate_candidates, generate_stage1, sample_annotated_batches,
    select_pair, CandidateJudge, CompressionConfig, CompressionError, Compressor, PairRecord,
    RandomCompressor, RemoteCompressor, COMPRESSOR_INSTRUCTION,
};
use crate::dataset::{import_wmt_tsv, load_dataset, Dataset};
use crate::gateway::http::HttpBackend;
use crate::gateway::mock::MockBackend;
use crate::gateway::{Backend, GatewayClient, RetryPolicy};
use crate::metaeval::{aggregate, relative_degradation, CorrelationMode, RunRecord};
use crate::mqm::SeverityWeights;
use crate::pipeline::{
    cell_dir, evaluate_cell, read_run_records, run_file_path, token_audit, validate_batch_sizes,
    CellOptions, TokenAudit, write_run_records,
};
use crate::prompt::PromptTemplate;
use crate::report;

const DEFAULT_BATCH_SIZES: [usize; 5] = [1, 2, 4, 8, 16];
const DEFAULT_COMPRESSOR: &str = "random:0.14";

#[derive(Parser)]
#[command(
    name = "batchgemba",
    version,
    about = "Batched MQM evaluation of machine translation with LLM judges"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evaluation grid over batch sizes and write run records.
    Evaluate(EvaluateArgs),
    /// Generate stage-1 compression training records (original → compressed).
    #[command(name = "gen-stage1")]
    GenStage1(GenStage1Args),
    /// Generate judged preference pairs of compressed batches.
    #[command(name = "gen-pairs")]
    GenPairs(GenPairsArgs),
    /// Account prompt tokens per batch size without any network traffic.
    #[command(name = "token-audit")]
    TokenAudit(TokenAuditArgs),
    /// Aggregate run records into correlation/token/error-rate reports.
    Report(ReportArgs),
    /// Convert a WMT-MQM-style TSV export into the native dataset format.
    #[command(name = "import-wmt")]
    ImportWmt(ImportWmtArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    /// Line-delimited dataset with human scores and annotated spans.
    #[arg(long)]
    dataset: PathBuf,
    /// Model identifier recorded in run records (defaults to the provider's).
    #[arg(long)]
    model: Option<String>,
    /// Provider: "http" or "mock:<script-path>".
    #[arg(long, default_value = "http")]
    provider: String,
    /// Base URL of an OpenAI-style chat-completions endpoint.
    #[arg(long)]
    provider_url: Option<String>,
    /// Single batch size (overrides --batch-sizes).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated batch sizes, e.g. "1,2,4,8,16".
    #[arg(long)]
    batch_sizes: Option<String>,
    /// Compress example texts before prompting.
    #[arg(long)]
    compress: bool,
    /// Compressor: "random:<ratio>" or "model:<id>".
    #[arg(long)]
    compressor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum concurrent in-flight requests.
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Prompt template JSON (defaults to the shipped template).
    #[arg(long)]
    template: Option<PathBuf>,
    /// Output root for run records.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenStage1Args {
    #[arg(long)]
    dataset: PathBuf,
    /// Number of records to generate.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt template JSON; its per-example frame shapes the record bodies.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Output file (line-delimited JSON).
    #[arg(long, default_value = "stage1.jsonl")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenPairsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Judge model identifier (defaults to the provider's).
    #[arg(long)]
    model: Option<String>,
    /// Judge provider: "http" or "mock:<script-path>".
    #[arg(long, default_value = "http")]
    provider: String,
    #[arg(long)]
    provider_url: Option<String>,
    /// Compressor producing the candidates: "random:<ratio>" or "model:<id>".
    #[arg(long, default_value = DEFAULT_COMPRESSOR)]
    compressor: String,
    /// Candidates sampled per batch (at least 2).
    #[arg(long, default_value_t = 8)]
    candidates: usize,
    /// Number of batches to draw.
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    template: Option<PathBuf>,
    /// Output file (line-delimited JSON).
    #[arg(long, default_value = "pairs.jsonl")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TokenAuditArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    batch_sizes: Option<String>,
    /// Audit compressed prompts instead of plain ones.
    #[arg(long)]
    compress: bool,
    /// Compressor; the audit runs offline, so only "random:<ratio>" works.
    #[arg(long)]
    compressor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run-record files or directories to scan for *.jsonl.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Batch size the degradation series normalizes against.
    #[arg(long, default_value_t = 1)]
    baseline_batch_size: usize,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
    /// How each row's correlation pools examples.
    #[arg(long, value_enum, default_value_t = CorrelationArg::Pooled)]
    correlation_mode: CorrelationArg,
    /// Directory for the report artifact files.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct ImportWmtArgs {
    /// The TSV export to convert.
    input: PathBuf,
    /// Output file (line-delimited JSON in the native dataset format).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Table,
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CorrelationArg {
    Pooled,
    PerPairMean,
}

impl From<CorrelationArg> for CorrelationMode {
    fn from(arg: CorrelationArg) -> CorrelationMode {
        match arg {
            CorrelationArg::Pooled => CorrelationMode::Pooled,
            CorrelationArg::PerPairMean => CorrelationMode::PerPairMean,
        }
    }
}

/// Optional overrides loadable from a JSON file. Anything absent falls back
/// to the built-in default; any flag overrides the file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    batch_sizes: Option<Vec<usize>>,
    seed: Option<u64>,
    max_in_flight: Option<usize>,
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    weights: Option<SeverityWeights>,
    stage1: Option<Stage1Ranges>,
    retry: Option<RetryConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage1Ranges {
    ratio_min: Option<f64>,
    ratio_max: Option<f64>,
    batch_size_min: Option<usize>,
    batch_size_max: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetryConfig {
    max_attempts: Option<u32>,
    base_delay_ms: Option<u64>,
    max_delay_ms: Option<u64>,
}

fn read_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
        }
    }
}

/// Settings shared by the networked commands after layering.
struct Common {
    seed: u64,
    max_in_flight: usize,
    temperature: f64,
    max_tokens: u32,
    weights: SeverityWeights,
    retry: RetryPolicy,
}

fn resolve_common(
    file: &FileConfig,
    seed: Option<u64>,
    max_in_flight: Option<usize>,
) -> anyhow::Result<Common> {
    let retry_defaults = RetryPolicy::default();
    let retry = match &file.retry {
        None => retry_defaults,
        Some(retry) => RetryPolicy {
            max_attempts: retry.max_attempts.unwrap_or(retry_defaults.max_attempts),
            base_delay: retry
                .base_delay_ms
                .map(Duration::from_millis)
                .unwrap_or(retry_defaults.base_delay),
            max_delay: retry
                .max_delay_ms
                .map(Duration::from_millis)
                .unwrap_or(retry_defaults.max_delay),
        },
    };
    let weights = file.weights.unwrap_or_default();
    weights.validate()?;
    let common = Common {
        seed: seed.or(file.seed).unwrap_or(0),
        max_in_flight: max_in_flight.or(file.max_in_flight).unwrap_or(4),
        temperature: file.temperature.unwrap_or(0.0),
        max_tokens: file.max_tokens.unwrap_or(2048),
        weights,
        retry,
    };
    if common.max_in_flight < 1 {
        bail!("max_in_flight must be at least 1");
    }
    Ok(common)
}

fn resolve_batch_sizes(
    single: Option<usize>,
    list: Option<&str>,
    file: &FileConfig,
) -> anyhow::Result<Vec<usize>> {
    let sizes = if let Some(size) = single {
        vec![size]
    } else if let Some(list) = list {
        parse_batch_sizes(list)?
    } else if let Some(sizes) = &file.batch_sizes {
        sizes.clone()
    } else {
        DEFAULT_BATCH_SIZES.to_vec()
    };
    Ok(validate_batch_sizes(&sizes)?)
}

fn parse_batch_sizes(list: &str) -> anyhow::Result<Vec<usize>> {
    list.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .with_context(|| format!("bad batch size '{}'", part.trim()))
        })
        .collect()
}

enum ProviderSpec {
    Mock(PathBuf),
    Http,
}

fn parse_provider(spec: &str) -> anyhow::Result<ProviderSpec> {
    if let Some(path) = spec.strip_prefix("mock:") {
        if path.is_empty() {
            bail!("mock provider needs a script path: mock:<path>");
        }
        Ok(ProviderSpec::Mock(PathBuf::from(path)))
    } else if spec == "http" {
        Ok(ProviderSpec::Http)
    } else {
        bail!("provider must be 'http' or 'mock:<script-path>', got '{spec}'")
    }
}

fn build_backend(
    provider: &str,
    provider_url: Option<&str>,
    model: Option<&str>,
) -> anyhow::Result<Arc<dyn Backend>> {
    match parse_provider(provider)? {
        ProviderSpec::Mock(path) => {
            if provider_url.is_some() {
                bail!("--provider-url conflicts with a mock provider");
            }
            Ok(Arc::new(MockBackend::from_script_file(&path)?))
        }
        ProviderSpec::Http => {
            let url =
                provider_url.context("--provider-url is required with the http provider")?;
            let model = model.context("--model is required with the http provider")?;
            Ok(Arc::new(HttpBackend::new(url, model, true)?))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CompressorSpec {
    Random(f64),
    Model(String),
}

impl CompressorSpec {
    fn parse(spec: &str) -> anyhow::Result<CompressorSpec> {
        if let Some(ratio) = spec.strip_prefix("random:") {
            let ratio: f64 = ratio
                .parse()
                .with_context(|| format!("bad compression ratio '{ratio}'"))?;
            if !ratio.is_finite() || !(0.0..1.0).contains(&ratio) {
                bail!("compression ratio must lie in [0, 1), got {ratio}");
            }
            Ok(CompressorSpec::Random(ratio))
        } else if let Some(model) = spec.strip_prefix("model:") {
            if model.is_empty() {
                bail!("model compressor needs an identifier: model:<id>");
            }
            Ok(CompressorSpec::Model(model.to_string()))
        } else {
            bail!("compressor must be 'random:<ratio>' or 'model:<id>', got '{spec}'")
        }
    }

    fn build(
        &self,
        client: &Arc<GatewayClient>,
        template: &PromptTemplate,
        common: &Common,
    ) -> Box<dyn Compressor> {
        match self {
            CompressorSpec::Random(ratio) => Box::new(RandomCompressor { ratio: *ratio }),
            CompressorSpec::Model(model) => Box::new(RemoteCompressor {
                client: Arc::clone(client),
                model: model.clone(),
                frame: template.per_example_frame.clone(),
                instruction: COMPRESSOR_INSTRUCTION.to_string(),
                temperature: 0.7,
                max_tokens: common.max_tokens,
            }),
        }
    }
}

fn load_template(path: Option<&Path>) -> anyhow::Result<PromptTemplate> {
    match path {
        None => Ok(PromptTemplate::shipped_default()),
        Some(path) => Ok(PromptTemplate::from_file(path)
            .with_context(|| format!("loading template {}", path.display()))?),
    }
}

fn load_dataset_checked(path: &Path) -> anyhow::Result<Dataset> {
    let report = load_dataset(path)?;
    for diagnostic in &report.diagnostics {
        eprintln!(
            "dataset line {}: {}",
            diagnostic.line, diagnostic.message
        );
    }
    let rejected = report.rejected_count();
    if rejected > 0 {
        eprintln!("dataset: {rejected} records rejected");
    }
    if report.dataset.is_empty() {
        bail!("dataset {} has no usable examples", path.display());
    }
    Ok(report.dataset)
}

/// Everything an evaluate run resolved to, echoed next to its outputs so a
/// run is reproducible from its artifacts alone.
#[derive(Debug, Serialize)]
struct EffectiveConfig {
    dataset: String,
    model: String,
    provider: String,
    batch_sizes: Vec<usize>,
    compress: bool,
    compressor: Option<String>,
    seed: u64,
    max_in_flight: usize,
    temperature: f64,
    max_tokens: u32,
    weights: SeverityWeights,
    template: String,
}

/// Parses arguments and runs the selected command on a fresh runtime.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let result = runtime.block_on(async {
        match cli.command {
            Command::Evaluate(args) => cmd_evaluate(args).await,
            Command::GenStage1(args) => cmd_gen_stage1(args),
            Command::GenPairs(args) => cmd_gen_pairs(args).await,
            Command::TokenAudit(args) => cmd_token_audit(args).await,
            Command::Report(args) => cmd_report(args),
            Command::ImportWmt(args) => cmd_import_wmt(args),
        }
    });
    match result {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(2)
        }
    }
}

async fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<ExitCode> {
    let file = read_config(args.config.as_deref())?;
    let common = resolve_common(&file, args.seed, args.max_in_flight)?;
    let batch_sizes = resolve_batch_sizes(args.batch_size, args.batch_sizes.as_deref(), &file)?;
    let template = load_template(args.template.as_deref())?;
    let compressor_spec = match (args.compress, args.compressor.as_deref()) {
        (false, _) => None,
        (true, spec) => Some(CompressorSpec::parse(spec.unwrap_or(DEFAULT_COMPRESSOR))?),
    };

    let backend = build_backend(&args.provider, args.provider_url.as_deref(), args.model.as_deref())?;
    let model_id = args.model.clone().unwrap_or_else(|| backend.id());
    let client = Arc::new(GatewayClient::new(backend, common.retry, common.max_in_flight));
    let compressor = compressor_spec
        .as_ref()
        .map(|spec| spec.build(&client, &template, &common));

    let dataset = load_dataset_checked(&args.dataset)?;

    let cell = cell_dir(&args.out, &model_id, args.compress);
    std::fs::create_dir_all(&cell)?;
    let effective = EffectiveConfig {
        dataset: args.dataset.display().to_string(),
        model: model_id.clone(),
        provider: match args.provider_url.as_deref() {
            Some(url) => format!("http:{url}"),
            None => args.provider.clone(),
        },
        batch_sizes: batch_sizes.clone(),
        compress: args.compress,
        compressor: compressor.as_ref().map(|c| c.id()),
        seed: common.seed,
        max_in_flight: common.max_in_flight,
        temperature: common.temperature,
        max_tokens: common.max_tokens,
        weights: common.weights,
        template: args
            .template
            .as_ref()
            .map_or("shipped".into(), |p| p.display().to_string()),
    };
    std::fs::write(
        cell.join("run_config.json"),
        serde_json::to_string_pretty(&effective)?,
    )?;

    let mut transport_failures = 0usize;
    println!(
        "evaluate: model={model_id} compression={} sizes={batch_sizes:?} seed={}",
        if args.compress { "on" } else { "off" },
        common.seed
    );
    for &batch_size in &batch_sizes {
        let outcome = evaluate_cell(
            &dataset,
            &client,
            compressor.as_deref(),
            &template,
            &common.weights,
            &CellOptions {
                model_id: model_id.clone(),
                batch_size,
                seed: common.seed,
                temperature: common.temperature,
                max_tokens: common.max_tokens,
            },
        )
        .await?;

        for note in &outcome.diagnostics {
            eprintln!("note: {note}");
        }
        for failure in &outcome.failures {
            eprintln!("failed batch {}: {}", failure.batch_id, failure.message);
        }
        transport_failures += outcome.failures.len();

        let path = run_file_path(&args.out, &model_id, args.compress, batch_size);
        write_run_records(&path, &outcome.records)?;

        // The console line is computed from exactly what went to disk.
        let rows = aggregate(&outcome.records, CorrelationMode::Pooled);
        let malformed: usize = outcome
            .records
            .iter()
            .flat_map(|r| &r.examples)
            .filter(|e| e.malformed)
            .count();
        match rows.first() {
            Some(row) => println!(
                "bs{batch_size}: batches={} scored={} malformed={malformed} pearson={} error_rate={:.3} tokens={} -> {}",
                outcome.records.len(),
                row.n_scored,
                row.pearson_r
                    .map_or_else(|| "-".into(), |r| format!("{r:.3}")),
                row.error_rate,
                row.total_tokens,
                path.display()
            ),
            None => println!(
                "bs{batch_size}: batches=0 scored=0 malformed=0 pearson=- error_rate=- tokens=0 -> {}",
                path.display()
            ),
        }
    }
    let (prompt_tokens, completion_tokens) = client.usage_totals();
    println!("usage: {prompt_tokens} prompt + {completion_tokens} completion tokens");

    if transport_failures > 0 {
        eprintln!(
            "{transport_failures} batches failed in transport; partial results were persisted"
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_stage1(args: GenStage1Args) -> anyhow::Result<ExitCode> {
    let file = read_config(args.config.as_deref())?;
    let common = resolve_common(&file, args.seed, None)?;
    let template = load_template(args.template.as_deref())?;
    let dataset = load_dataset_checked(&args.dataset)?;

    let defaults = CompressionConfig::default();
    let ranges = file.stage1.unwrap_or_default();
    let config = CompressionConfig {
        ratio_min: ranges.ratio_min.unwrap_or(defaults.ratio_min),
        ratio_max: ranges.ratio_max.unwrap_or(defaults.ratio_max),
        batch_size_min: ranges.batch_size_min.unwrap_or(defaults.batch_size_min),
        batch_size_max: ranges.batch_size_max.unwrap_or(defaults.batch_size_max),
        seed: common.seed,
    };

    let generator = generate_stage1(&dataset, args.count, &config, &template.per_example_frame)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    let mut written = 0usize;
    for record in generator {
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
        written += 1;
    }
    writer.flush()?;
    println!("wrote {written} stage-1 records -> {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

async fn cmd_gen_pairs(args: GenPairsArgs) -> anyhow::Result<ExitCode> {
    let file = read_config(args.config.as_deref())?;
    let common = resolve_common(&file, args.seed, args.max_in_flight)?;
    let template = load_template(args.template.as_deref())?;
    let compressor_spec = CompressorSpec::parse(&args.compressor)?;
    if args.candidates < 2 {
        bail!("--candidates must be at least 2");
    }

    let backend = build_backend(&args.provider, args.provider_url.as_deref(), args.model.as_deref())?;
    let client = Arc::new(GatewayClient::new(backend, common.retry, common.max_in_flight));
    let compressor = compressor_spec.build(&client, &template, &common);
    let judge = CandidateJudge {
        client: &client,
        template: &template,
        weights: common.weights,
        temperature: common.temperature,
        max_tokens: common.max_tokens,
    };

    let dataset = load_dataset_checked(&args.dataset)?;
    let batches = sample_annotated_batches(&dataset, 2..=8, args.count, common.seed)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    let mut written = 0usize;
    let mut skipped_short = 0usize;
    let mut skipped_degenerate = 0usize;
    let mut dropped_candidates = 0usize;
    let mut judge_failures = 0usize;

    for (index, batch) in batches.iter().enumerate() {
        let set = generate_candidates(
            batch,
            compressor.as_ref(),
            args.candidates,
            compression::derive_seed(common.seed, index as u64),
        )
        .await?;
        for note in &set.diagnostics {
            eprintln!("batch {}: {note}", batch.batch_id);
        }
        dropped_candidates += set.diagnostics.len();

        let valid = filter_valid(set.candidates);
        if valid.len() < 2 {
            eprintln!(
                "batch {}: only {} usable candidates; skipped",
                batch.batch_id,
                valid.len()
            );
            skipped_short += 1;
            continue;
        }

        let judgments = judge.judge_many(&valid, batch).await?;
        let mut scored = Vec::with_capacity(valid.len());
        for (candidate, judgment) in valid.into_iter().zip(judgments) {
            match judgment {
                Ok(quality) => scored.push((candidate, quality)),
                Err(error) => {
                    eprintln!(
                        "batch {}: judging seed {:#018x} failed: {error}",
                        batch.batch_id, candidate.generator_seed
                    );
                    judge_failures += 1;
                }
            }
        }
        if scored.len() < 2 {
            eprintln!(
                "batch {}: only {} judged candidates; skipped",
                batch.batch_id,
                scored.len()
            );
            skipped_short += 1;
            continue;
        }

        match select_pair(&scored) {
            Ok(pair) => {
                let mut record =
                    PairRecord::from_pair(&pair, batch, &template.per_example_frame)?;
                record
                    .meta
                    .insert("lang_pair".into(), serde_json::json!(batch.lang_pair));
                record
                    .meta
                    .insert("batch_size".into(), serde_json::json!(batch.len()));
                record
                    .meta
                    .insert("candidates".into(), serde_json::json!(args.candidates));
                serde_json::to_writer(&mut writer, &record)?;
                writer.write_all(b"\n")?;
                written += 1;
            }
            Err(CompressionError::DegenerateCandidates) => {
                eprintln!(
                    "batch {}: candidates are indistinguishable; skipped",
                    batch.batch_id
                );
                skipped_degenerate += 1;
            }
            Err(error) => return Err(error.into()),
        }
    }
    writer.flush()?;

    println!(
        "pairs: {written} written, {skipped_short} batches skipped (too few candidates), \
         {skipped_degenerate} skipped (indistinguishable), {dropped_candidates} candidates dropped, \
         {judge_failures} judge failures -> {}",
        args.out.display()
    );
    if judge_failures > 0 {
        eprintln!("judge transport failures occurred; output is partial");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

async fn cmd_token_audit(args: TokenAuditArgs) -> anyhow::Result<ExitCode> {
    let file = read_config(args.config.as_deref())?;
    let common = resolve_common(&file, args.seed, None)?;
    let batch_sizes = resolve_batch_sizes(args.batch_size, args.batch_sizes.as_deref(), &file)?;
    let template = load_template(args.template.as_deref())?;
    let dataset = load_dataset_checked(&args.dataset)?;

    let compressor: Option<Box<dyn Compressor>> = match (args.compress, args.compressor.as_deref())
    {
        (false, _) => None,
        (true, spec) => match CompressorSpec::parse(spec.unwrap_or(DEFAULT_COMPRESSOR))? {
            CompressorSpec::Random(ratio) => Some(Box::new(RandomCompressor { ratio })),
            CompressorSpec::Model(_) => {
                bail!("token-audit runs offline; only a random:<ratio> compressor is supported")
            }
        },
    };

    let audit = token_audit(
        &dataset,
        &template,
        compressor.as_deref(),
        &batch_sizes,
        common.seed,
    )
    .await?;
    print!("{}", render_audit(&audit, args.format));
    Ok(ExitCode::SUCCESS)
}

fn render_audit(audit: &TokenAudit, format: OutputFormat) -> String {
    let ratio_header = format!("ratio_vs_bs{}", audit.baseline_batch_size);
    match format {
        OutputFormat::Table => {
            let mut lines = vec![format!(
                "{:<10}  {:>7}  {:>13}  {:>14}  {:>14}  {:>12}",
                "batch_size", "batches", "prompt_tokens", "tokens/example", "segment_tokens", ratio_header
            )];
            for row in &audit.rows {
                lines.push(format!(
                    "{:<10}  {:>7}  {:>13}  {:>14.1}  {:>14}  {:>12.3}",
                    row.batch_size,
                    row.batches,
                    row.prompt_tokens,
                    row.tokens_per_example,
                    row.segment_tokens,
                    row.ratio_vs_baseline
                ));
            }
            lines.push(format!("examples: {}", audit.example_count));
            lines.join("\n") + "\n"
        }
        OutputFormat::Csv => {
            let mut out = format!(
                "batch_size,batches,prompt_tokens,tokens_per_example,segment_tokens,{ratio_header}\n"
            );
            for row in &audit.rows {
                out.push_str(&format!(
                    "{},{},{},{:.3},{},{:.6}\n",
                    row.batch_size,
                    row.batches,
                    row.prompt_tokens,
                    row.tokens_per_example,
                    row.segment_tokens,
                    row.ratio_vs_baseline
                ));
            }
            out
        }
        OutputFormat::Jsonl => {
            let mut out = String::new();
            for row in &audit.rows {
                out.push_str(&serde_json::to_string(row).expect("row serializes"));
                out.push('\n');
            }
            out
        }
    }
}

fn collect_run_files(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|entry| entry.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, found)?;
            } else if path.extension().is_some_and(|ext| ext == "jsonl") {
                found.push(path);
            }
        }
        Ok(())
    }

    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            walk(input, &mut files)
                .with_context(|| format!("scanning {}", input.display()))?;
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            bail!("input {} does not exist", input.display());
        }
    }
    if files.is_empty() {
        bail!("no run-record files found under the given inputs");
    }
    Ok(files)
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<ExitCode> {
    let files = collect_run_files(&args.inputs)?;
    let mut records: Vec<RunRecord> = Vec::new();
    for file in &files {
        records.extend(read_run_records(file)?);
    }
    if records.is_empty() {
        bail!("run files contain no records");
    }

    let rows = aggregate(&records, args.correlation_mode.into());
    let (degradation, diagnostics) = relative_degradation(&rows, args.baseline_batch_size);
    for note in &diagnostics {
        eprintln!("note: {note}");
    }

    report::write_report_dir(&args.out, &rows, &degradation)?;
    eprintln!("report artifacts -> {}", args.out.display());

    match args.format {
        OutputFormat::Table => {
            print!("{}", report::render_table(&rows));
            println!();
            println!("correlation by batch size:");
            print!("{}", report::render_pivot(&rows, report::PivotMetric::Pearson));
            println!();
            println!(
                "correlation relative to bs{}:",
                args.baseline_batch_size
            );
            print!("{}", report::render_degradation_table(&degradation));
        }
        OutputFormat::Csv => print!("{}", report::render_csv(&rows)),
        OutputFormat::Jsonl => print!("{}", report::render_jsonl(&rows)),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_import_wmt(args: ImportWmtArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let (examples, diagnostics) = import_wmt_tsv(&text)?;
    for note in &diagnostics {
        eprintln!("note: {note}");
    }
    if examples.is_empty() {
        bail!("no usable segments in {}", args.input.display());
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    for example in &examples {
        serde_json::to_writer(&mut writer, example)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    println!(
        "imported {} segments ({} notes) -> {}",
        examples.len(),
        diagnostics.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_specs_parse() {
        assert!(matches!(parse_provider("http"), Ok(ProviderSpec::Http)));
        assert!(matches!(
            parse_provider("mock:scripts/a.json"),
            Ok(ProviderSpec::Mock(_))
        ));
        assert!(parse_provider("mock:").is_err());
        assert!(parse_provider("grpc").is_err());
    }

    #[test]
    fn compressor_specs_parse() {
        assert_eq!(
            CompressorSpec::parse("random:0.14").unwrap(),
            CompressorSpec::Random(0.14)
        );
        assert_eq!(
            CompressorSpec::parse("model:shortener-v2").unwrap(),
            CompressorSpec::Model("shortener-v2".into())
        );
        assert!(CompressorSpec::parse("random:1.0").is_err());
        assert!(CompressorSpec::parse("random:nan").is_err());
        assert!(CompressorSpec::parse("model:").is_err());
        assert!(CompressorSpec::parse("gzip").is_err());
    }

    #[test]
    fn batch_size_resolution_layers_flags_over_file_over_defaults() {
        let file = FileConfig {
            batch_sizes: Some(vec![2, 4]),
            ..FileConfig::default()
        };
        assert_eq!(
            resolve_batch_sizes(Some(8), Some("1,2"), &file).unwrap(),
            vec![8]
        );
        assert_eq!(
            resolve_batch_sizes(None, Some("1, 2 ,4"), &file).unwrap(),
            vec![1, 2, 4]
        );
        assert_eq!(resolve_batch_sizes(None, None, &file).unwrap(), vec![2, 4]);
        assert_eq!(
            resolve_batch_sizes(None, None, &FileConfig::default()).unwrap(),
            DEFAULT_BATCH_SIZES.to_vec()
        );
        assert!(resolve_batch_sizes(None, Some("2,2"), &file).is_err());
        assert!(resolve_batch_sizes(None, Some("0"), &file).is_err());
    }

    #[test]
    fn config_file_overrides_only_what_it_names() {
        let file: FileConfig =
            serde_json::from_str(r#"{"seed": 9, "retry": {"max_attempts": 2}}"#).unwrap();
        let common = resolve_common(&file, None, None).unwrap();
        assert_eq!(common.seed, 9);
        assert_eq!(common.retry.max_attempts, 2);
        assert_eq!(common.retry.base_delay, RetryPolicy::default().base_delay);
        assert_eq!(common.max_in_flight, 4);

        // A flag still wins over the file.
        let common = resolve_common(&file, Some(77), None).unwrap();
        assert_eq!(common.seed, 77);

        assert!(serde_json::from_str::<FileConfig>(r#"{"unknown_key": 1}"#).is_err());
    }

    #[test]
    fn cli_declares_expected_subcommands_and_flags() {
        use clap::CommandFactory;
        let command = Cli::command();
        let names: Vec<&str> = command
            .get_subcommands()
            .map(|c| c.get_name())
            .collect();
        for expected in [
            "evaluate",
            "gen-stage1",
            "gen-pairs",
            "token-audit",
            "report",
            "import-wmt",
        ] {
            assert!(names.contains(&expected), "missing subcommand {expected}");
        }

        let evaluate = command
            .get_subcommands()
            .find(|c| c.get_name() == "evaluate")
            .unwrap();
        let flags: Vec<String> = evaluate
            .get_arguments()
            .filter_map(|a| a.get_long().map(str::to_string))
            .collect();
        for expected in [
            "dataset",
            "model",
            "provider",
            "provider-url",
            "batch-size",
            "batch-sizes",
            "compress",
            "compressor",
            "seed",
            "max-in-flight",
            "template",
            "out",
        ] {
            assert!(flags.contains(&expected.to_string()), "missing --{expected}");
        }

        let report = command
            .get_subcommands()
            .find(|c| c.get_name() == "report")
            .unwrap();
        let flags: Vec<String> = report
            .get_arguments()
            .filter_map(|a| a.get_long().map(str::to_string))
            .collect();
        for expected in ["baseline-batch-size", "format", "out"] {
            assert!(flags.contains(&expected.to_string()), "missing --{expected}");
        }
        command.clone().debug_assert();
    }

    #[test]
    fn audit_rendering_agrees_across_formats() {
        let audit = TokenAudit {
            baseline_batch_size: 1,
            example_count: 8,
            rows: vec![
                crate::pipeline::AuditRow {
                    batch_size: 1,
                    batches: 8,
                    prompt_tokens: 4000,
                    tokens_per_example: 500.0,
                    segment_tokens: 400,
                    ratio_vs_baseline: 1.0,
                },
                crate::pipeline::AuditRow {
                    batch_size: 4,
                    batches: 2,
                    prompt_tokens: 1600,
                    tokens_per_example: 200.0,
                    segment_tokens: 400,
                    ratio_vs_baseline: 2.5,
                },
            ],
        };
        let table = render_audit(&audit, OutputFormat::Table);
        assert!(table.contains("ratio_vs_bs1"));
        assert!(table.contains("2.500"));
        let csv = render_audit(&audit, OutputFormat::Csv);
        assert!(csv.starts_with("batch_size,"));
        assert!(csv.contains("4,2,1600,200.000,400,2.500000"));
        let jsonl = render_audit(&audit, OutputFormat::Jsonl);
        assert_eq!(jsonl.lines().count(), 2);
    }
}
