//! End-to-end evaluation runs: batch construction, optional compression,
//! prompt rendering, bounded-concurrency dispatch, response parsing, and
//! run-record assembly — plus the network-free token audit.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::compression::{self, Compressor, CompressionError};
use crate::dataset::{make_batches, Dataset, DatasetError, EvalBatch, MAX_BATCH_SIZE};
use crate::gateway::{CompletionRequest, GatewayClient};
use crate::metaeval::{ExampleRecord, RunRecord};
use crate::mqm::SeverityWeights;
use crate::parser::{outcomes_to_scores, parse_batch_response};
use crate::prompt::{render_batch_prompt, PromptError, PromptTemplate};
use crate::tokenizer::{RuleTokenizer, Tokenizer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error("example {0} has no human score; evaluation needs annotated data")]
    MissingHumanScore(String),
    #[error("batch sizes must be positive and distinct, got {0:?}")]
    BadBatchSizes(Vec<usize>),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad run record at {path} line {line}: {message}")]
    BadRunRecord {
        path: String,
        line: usize,
        message: String,
    },
}

/// Settings for one run cell (a single batch size).
#[derive(Debug, Clone)]
pub struct CellOptions {
    /// Model identifier recorded in run records and sent with requests.
    pub model_id: String,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// A batch that produced no run record, with why.
#[derive(Debug, Clone)]
pub struct BatchFailure {
    pub batch_id: String,
    pub message: String,
    /// True when the transport gave up (retries exhausted or a non-retryable
    /// provider error); false for preparation failures such as a compressor
    /// returning the wrong shape.
    pub transport: bool,
}

/// Everything one cell evaluation produced. Records plus failures account
/// for every batch; malformed model output is data inside records, never a
/// failure.
#[derive(Debug)]
pub struct CellOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<BatchFailure>,
    pub diagnostics: Vec<String>,
}

struct PreparedBatch {
    batch: EvalBatch,
    request: CompletionRequest,
}

/// Evaluates `dataset` at one fixed batch size: shuffles into batches,
/// optionally compresses each batch, renders prompts, shows each original
/// batch to the backend (scripted oracles read ground truth there), runs
/// all requests with bounded concurrency, parses, and scores.
///
/// Compression never touches what the run is judged against: prompts render
/// the compressed texts, while human scores and the oracle's view come from
/// the original batch.
pub async fn evaluate_cell(
    dataset: &Dataset,
    client: &GatewayClient,
    compressor: Option<&dyn Compressor>,
    template: &PromptTemplate,
    weights: &SeverityWeights,
    options: &CellOptions,
) -> Result<CellOutcome, PipelineError> {
    for example in &dataset.examples {
        if example.human_score.is_none() {
            return Err(PipelineError::MissingHumanScore(example.id.clone()));
        }
    }
    let batches = make_batches(dataset, 1..=MAX_BATCH_SIZE, options.seed, Some(options.batch_size))?;

    let mut prepared = Vec::with_capacity(batches.len());
    let mut failures = Vec::new();
    let mut diagnostics = Vec::new();
    for (index, batch) in batches.into_iter().enumerate() {
        let rendered = match compressor {
            None => batch.clone(),
            Some(compressor) => {
                let seed = compression::derive_seed(options.seed, index as u64);
                match compressor.compress(&batch, seed).await {
                    Ok(sides) => match compression::replace_sides(&batch, &sides) {
                        Ok(examples) => EvalBatch::new(batch.batch_id.clone(), examples)
                            .expect("replacement keeps the language pair"),
                        Err(error) => {
                            failures.push(BatchFailure {
                                batch_id: batch.batch_id.clone(),
                                message: format!("compressor output rejected: {error}"),
                                transport: false,
                            });
                            continue;
                        }
                    },
                    Err(CompressionError::Gateway(error)) => {
                        failures.push(BatchFailure {
                            batch_id: batch.batch_id.clone(),
                            message: format!("compression transport failed: {error}"),
                            transport: true,
                        });
                        continue;
                    }
                    Err(error) => return Err(error.into()),
                }
            }
        };

        let bundle = render_batch_prompt(&rendered, template, &RuleTokenizer)?;
        let request = CompletionRequest {
            tag: batch.batch_id.clone(),
            messages: bundle.messages,
            model: options.model_id.clone(),
            temperature: options.temperature,
            max_tokens: options.max_tokens,
            schema: Some(bundle.schema),
        };
        // Ground truth comes from the original batch even when the prompt
        // rendered compressed texts.
        client.backend().observe_batch(&batch.batch_id, &batch);
        prepared.push(PreparedBatch { batch, request });
    }

    let requests: Vec<CompletionRequest> =
        prepared.iter().map(|p| p.request.clone()).collect();
    let responses = client.run_many(&requests).await;

    let mut records = Vec::with_capacity(prepared.len());
    for (entry, result) in prepared.into_iter().zip(responses) {
        match result {
            Ok(response) => {
                let schema = entry.request.schema.as_ref().expect("attached above");
                let parsed = parse_batch_response(&response.text, schema);
                for note in &parsed.diagnostics {
                    diagnostics.push(format!("{}: {note}", entry.batch.batch_id));
                }
                let scores = outcomes_to_scores(&parsed.outcomes, weights);
                let examples = entry
                    .batch
                    .examples
                    .iter()
                    .zip(&scores)
                    .map(|(example, score)| ExampleRecord {
                        id: example.id.clone(),
                        human_score: example.human_score.expect("checked up front"),
                        llm_score: *score,
                        malformed: score.is_none(),
                    })
                    .collect();
                records.push(RunRecord {
                    model_id: options.model_id.clone(),
                    compressed: compressor.is_some(),
                    batch_size: options.batch_size,
                    lang_pair: entry.batch.lang_pair.clone(),
                    examples,
                    usage: response.usage,
                });
            }
            Err(error) => failures.push(BatchFailure {
                batch_id: entry.batch.batch_id.clone(),
                message: error.to_string(),
                transport: true,
            }),
        }
    }

    Ok(CellOutcome {
        records,
        failures,
        diagnostics,
    })
}

/// Positive, distinct, ascending; anything else is a configuration error.
pub fn validate_batch_sizes(sizes: &[usize]) -> Result<Vec<usize>, PipelineError> {
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sizes.is_empty() || sorted.len() != sizes.len() || sorted[0] < 1 {
        return Err(PipelineError::BadBatchSizes(sizes.to_vec()));
    }
    Ok(sorted)
}

/// Directory holding one (model, compression) cell's artifacts.
pub fn cell_dir(out_root: &Path, model_id: &str, compressed: bool) -> PathBuf {
    let model_dir: String = model_id
        .chars()
        .map(|c| if c == '/' || c == '\\' { '-' } else { c })
        .collect();
    out_root
        .join(model_dir)
        .join(if compressed { "compressed" } else { "plain" })
}

/// Where one cell's run records live under the output root.
pub fn run_file_path(
    out_root: &Path,
    model_id: &str,
    compressed: bool,
    batch_size: usize,
) -> PathBuf {
    cell_dir(out_root, model_id, compressed).join(format!("bs{batch_size}.jsonl"))
}

/// Writes records as line-delimited JSON, one record per line, creating
/// parent directories. Output is a pure function of the records.
pub fn write_run_records(path: &Path, records: &[RunRecord]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads line-delimited run records, validating each.
pub fn read_run_records(path: &Path) -> Result<Vec<RunRecord>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (number, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::BadRunRecord {
                path: path.display().to_string(),
                line: number + 1,
                message: e.to_string(),
            })?;
        record.validate().map_err(|e| PipelineError::BadRunRecord {
            path: path.display().to_string(),
            line: number + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// One batch size's token accounting in an audit.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AuditRow {
    pub batch_size: usize,
    pub batches: usize,
    /// Rule-tokenizer tokens across all rendered prompts at this size.
    pub prompt_tokens: usize,
    pub tokens_per_example: f64,
    /// Tokens in the example texts alone (after compression when enabled).
    pub segment_tokens: usize,
    /// prompt_tokens(baseline) / prompt_tokens(this row).
    pub ratio_vs_baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenAudit {
    pub baseline_batch_size: usize,
    pub example_count: usize,
    pub rows: Vec<AuditRow>,
}

/// Renders every prompt the evaluation grid would send — without sending
/// anything — and accounts tokens per batch size. The baseline for ratios
/// is batch size 1 when requested, otherwise the smallest requested size.
pub async fn token_audit(
    dataset: &Dataset,
    template: &PromptTemplate,
    compressor: Option<&dyn Compressor>,
    batch_sizes: &[usize],
    seed: u64,
) -> Result<TokenAudit, PipelineError> {
    let sizes = validate_batch_sizes(batch_sizes)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &batch_size in &sizes {
        let batches = make_batches(dataset, 1..=MAX_BATCH_SIZE, seed, Some(batch_size))?;
        let mut prompt_tokens = 0usize;
        let mut segment_tokens = 0usize;
        let count = batches.len();
        for (index, batch) in batches.into_iter().enumerate() {
            let rendered = match compressor {
                None => batch,
                Some(compressor) => {
                    let sides = compressor
                        .compress(&batch, compression::derive_seed(seed, index as u64))
                        .await?;
                    let examples = compression::replace_sides(&batch, &sides)?;
                    EvalBatch::new(batch.batch_id.clone(), examples)
                        .expect("replacement keeps the language pair")
                }
            };
            let bundle = render_batch_prompt(&rendered, template, &RuleTokenizer)?;
            prompt_tokens += bundle.token_count;
            segment_tokens += rendered
                .examples
                .iter()
                .map(|e| RuleTokenizer.count(&e.source_text) + RuleTokenizer.count(&e.target_text))
                .sum::<usize>();
        }
        rows.push(AuditRow {
            batch_size,
            batches: count,
            prompt_tokens,
            tokens_per_example: prompt_tokens as f64 / dataset.len() as f64,
            segment_tokens,
            ratio_vs_baseline: f64::NAN,
        });
    }
    let baseline_batch_size = if sizes.contains(&1) { 1 } else { sizes[0] };
    let baseline_tokens = rows
        .iter()
        .find(|r| r.batch_size == baseline_batch_size)
        .expect("baseline row exists")
        .prompt_tokens;
    for row in &mut rows {
        row.ratio_vs_baseline = baseline_tokens as f64 / row.prompt_tokens as f64;
    }
    Ok(TokenAudit {
        baseline_batch_size,
        example_count: dataset.len(),
        rows,
    })
}
