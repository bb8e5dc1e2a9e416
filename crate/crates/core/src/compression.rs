//! Span-preserving prompt compression: stage-1 training data via random
//! token removal, and stage-2 preference pairs via candidate sampling,
//! format filtering, judge scoring, and best/worst selection.
//!
//! Removal granularity is rule-tokenizer tokens; a token is protected when
//! its character interval intersects any annotated error span on its side.

use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, EvalBatch, LangPair};
use crate::gateway::{CompletionRequest, GatewayClient, GatewayError};
use crate::mqm::{Side, SeverityWeights, TranslationExample};
use crate::parser::parse_batch_response;
use crate::prompt::{
    render_batch_body, Message, PromptError, PromptTemplate, Role,
};
use crate::tokenizer::{RuleTokenizer, Tokenizer};

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("compression ratio must be within [0, 1), got {0}")]
    BadRatio(f64),
    #[error("invalid compression config: {0}")]
    BadConfig(String),
    #[error("record count must be at least 1")]
    BadCount,
    #[error("candidate sampling needs k >= 2, got {0}")]
    TooFewSeeds(usize),
    #[error("pair selection needs at least 2 scored candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("candidates are indistinguishable (equal quality, tokens, and seed)")]
    DegenerateCandidates,
    #[error("example {0} has no human score; judging requires one")]
    MissingHumanScore(String),
    #[error("candidate shape does not match batch: {0}")]
    Shape(String),
    #[error("frame not invertible: {0}")]
    Frame(String),
    #[error("compressor emitted no parseable batch body")]
    Unparseable,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Sampling ranges for stage-1 generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub batch_size_min: usize,
    pub batch_size_max: usize,
    pub seed: u64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            ratio_min: 0.01,
            ratio_max: 0.70,
            batch_size_min: 2,
            batch_size_max: 8,
            seed: 0,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<(), CompressionError> {
        if !(self.ratio_min.is_finite() && self.ratio_max.is_finite()) {
            return Err(CompressionError::BadConfig("ratios must be finite".into()));
        }
        if !(0.0 <= self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max < 1.0) {
            return Err(CompressionError::BadConfig(format!(
                "need 0 <= ratio_min <= ratio_max < 1, got [{}, {}]",
                self.ratio_min, self.ratio_max
            )));
        }
        if !(1 <= self.batch_size_min && self.batch_size_min <= self.batch_size_max) {
            return Err(CompressionError::BadConfig(format!(
                "need 1 <= batch_size_min <= batch_size_max, got [{}, {}]",
                self.batch_size_min, self.batch_size_max
            )));
        }
        Ok(())
    }
}

/// One compressed version of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionCandidate {
    pub batch_id: String,
    /// (source', target') per example, aligned to the batch when valid.
    pub compressed_examples: Vec<(String, String)>,
    /// Rule-tokenizer tokens across all compressed sides.
    pub token_count: usize,
    /// Fraction of the batch's original tokens removed, in [0, 1).
    pub achieved_ratio: f64,
    pub format_valid: bool,
    pub generator_seed: u64,
}

/// Builds a candidate from emitted sides, computing token accounting and
/// format validity against the batch.
pub fn build_candidate(
    batch: &EvalBatch,
    compressed_examples: Vec<(String, String)>,
    generator_seed: u64,
) -> CompressionCandidate {
    let original_tokens: usize = batch
        .examples
        .iter()
        .map(|e| RuleTokenizer.count(&e.source_text) + RuleTokenizer.count(&e.target_text))
        .sum();
    let token_count: usize = compressed_examples
        .iter()
        .map(|(s, t)| RuleTokenizer.count(s) + RuleTokenizer.count(t))
        .sum();
    let format_valid = compressed_examples.len() == batch.len()
        && compressed_examples
            .iter()
            .all(|(s, t)| !s.trim().is_empty() && !t.trim().is_empty());
    // Degenerate emissions (empty sides, expansions) are clamped so the
    // ratio stays within [0, 1); they are format-invalid anyway.
    let achieved_ratio = if original_tokens == 0 {
        0.0
    } else {
        (original_tokens.saturating_sub(token_count) as f64 / original_tokens as f64)
            .clamp(0.0, 1.0 - f64::EPSILON)
    };
    CompressionCandidate {
        batch_id: batch.batch_id.clone(),
        compressed_examples,
        token_count,
        achieved_ratio,
        format_valid,
        generator_seed,
    }
}

/// Removes `round(ratio * removable)` unprotected tokens from one segment.
/// Returns the new text and (total, removed) token counts. A removal that
/// would empty the segment keeps one token; zero removals leave the
/// original string untouched, spacing included.
fn compress_segment(
    text: &str,
    protected_ranges: &[(usize, usize)],
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (String, usize, usize) {
    let tokens = RuleTokenizer.spans(text);
    let total = tokens.len();
    let removable: Vec<usize> = (0..total)
        .filter(|&i| {
            !protected_ranges
                .iter()
                .any(|&(start, end)| tokens[i].overlaps_chars(start, end))
        })
        .collect();
    let protected_count = total - removable.len();

    let mut remove_count = ((ratio * removable.len() as f64).round() as usize).min(removable.len());
    if protected_count == 0 && remove_count == total && total > 0 {
        remove_count = total - 1;
    }
    if remove_count == 0 {
        return (text.to_string(), total, 0);
    }

    let mut removed: Vec<usize> = sample(rng, removable.len(), remove_count)
        .into_iter()
        .map(|i| removable[i])
        .collect();
    removed.sort_unstable();

    let kept: Vec<&str> = (0..total)
        .filter(|i| removed.binary_search(i).is_err())
        .map(|i| tokens[i].slice(text))
        .collect();
    (kept.join(" "), total, remove_count)
}

fn protected_ranges(example: &TranslationExample, side: Side) -> Vec<(usize, usize)> {
    example
        .spans
        .iter()
        .filter(|s| s.side == side)
        .map(|s| (s.start_char, s.end_char))
        .collect()
}

/// Randomly removes about `ratio` of each segment's unprotected tokens,
/// never touching a token that overlaps an annotated error span. Both sides
/// of every example are compressed symmetrically. Deterministic under
/// `seed`.
pub fn random_compress(
    batch: &EvalBatch,
    ratio: f64,
    seed: u64,
) -> Result<CompressionCandidate, CompressionError> {
    if !ratio.is_finite() || !(0.0..1.0).contains(&ratio) {
        return Err(CompressionError::BadRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let compressed_examples: Vec<(String, String)> = batch
        .examples
        .iter()
        .map(|example| {
            let (source, _, _) = compress_segment(
                &example.source_text,
                &protected_ranges(example, Side::Source),
                ratio,
                &mut rng,
            );
            let (target, _, _) = compress_segment(
                &example.target_text,
                &protected_ranges(example, Side::Target),
                ratio,
                &mut rng,
            );
            (source, target)
        })
        .collect();
    Ok(build_candidate(batch, compressed_examples, seed))
}

/// A batch compressor: emits one (source', target') per example.
///
/// Two production implementations exist — the seeded random remover and a
/// remote model-backed compressor — plus scripted doubles in tests.
#[async_trait]
pub trait Compressor: Send + Sync {
    fn id(&self) -> String;
    async fn compress(
        &self,
        batch: &EvalBatch,
        seed: u64,
    ) -> Result<Vec<(String, String)>, CompressionError>;
}

/// Span-preserving random token removal at a fixed ratio.
pub struct RandomCompressor {
    pub ratio: f64,
}

#[async_trait]
impl Compressor for RandomCompressor {
    fn id(&self) -> String {
        format!("random:{}", self.ratio)
    }

    async fn compress(
        &self,
        batch: &EvalBatch,
        seed: u64,
    ) -> Result<Vec<(String, String)>, CompressionError> {
        Ok(random_compress(batch, self.ratio, seed)?.compressed_examples)
    }
}

pub const COMPRESSOR_INSTRUCTION: &str = "You shorten batched translation evaluation examples. Rewrite the batch below, removing words that carry little meaning while keeping every word that could evidence a translation error. Keep the exact format: the same number of examples, the same header lines, the same Source and Translation markers, and the same example order. Output only the rewritten batch.";

/// Model-backed compressor: renders the batch body, asks the model to
/// rewrite it, and parses the reply back into per-example sides. Variety
/// across seeds comes from sampling temperature; the seed is woven into the
/// request tag so scripted backends can key on it.
pub struct RemoteCompressor {
    pub client: Arc<GatewayClient>,
    pub model: String,
    pub frame: String,
    pub instruction: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl RemoteCompressor {
    pub fn request_tag(batch_id: &str, seed: u64) -> String {
        format!("{batch_id}-c{seed:016x}")
    }
}

#[async_trait]
impl Compressor for RemoteCompressor {
    fn id(&self) -> String {
        format!("model:{}", self.model)
    }

    async fn compress(
        &self,
        batch: &EvalBatch,
        seed: u64,
    ) -> Result<Vec<(String, String)>, CompressionError> {
        let codec = BodyCodec::new(&self.frame)?;
        let body = render_batch_body(&batch.examples, &self.frame);
        let request = CompletionRequest {
            tag: Self::request_tag(&batch.batch_id, seed),
            messages: vec![
                Message::new(Role::System, self.instruction.clone()),
                Message::new(Role::User, body),
            ],
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            schema: None,
        };
        let response = self.client.complete(&request).await?;
        let sides = codec.parse(&response.text);
        if sides.is_empty() {
            return Err(CompressionError::Unparseable);
        }
        Ok(sides)
    }
}

/// Renders and inverts batch bodies for a frame. Requires `{source}` and
/// `{target}` to sit on their own frame lines so emitted bodies can be
/// parsed back.
pub struct BodyCodec {
    source_prefix: String,
    source_suffix: String,
    target_prefix: String,
    target_suffix: String,
}

impl BodyCodec {
    pub fn new(frame: &str) -> Result<Self, CompressionError> {
        let find_line = |placeholder: &str| -> Result<(String, String), CompressionError> {
            let line = frame
                .lines()
                .find(|l| l.contains(placeholder))
                .ok_or_else(|| {
                    CompressionError::Frame(format!("no line contains {placeholder}"))
                })?;
            let others = ["{index}", "{src_lang}", "{tgt_lang}", "{source}", "{target}"]
                .iter()
                .filter(|p| **p != placeholder)
                .any(|p| line.contains(*p));
            if others {
                return Err(CompressionError::Frame(format!(
                    "{placeholder} must be alone on its frame line"
                )));
            }
            let at = line.find(placeholder).expect("checked");
            Ok((
                line[..at].to_string(),
                line[at + placeholder.len()..].to_string(),
            ))
        };
        let (source_prefix, source_suffix) = find_line("{source}")?;
        let (target_prefix, target_suffix) = find_line("{target}")?;
        Ok(BodyCodec {
            source_prefix,
            source_suffix,
            target_prefix,
            target_suffix,
        })
    }

    /// Extracts (source, target) pairs from a rendered body, in order. A
    /// target line completes the most recent unmatched source line.
    pub fn parse(&self, text: &str) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        let mut pending: Option<String> = None;
        for line in text.lines() {
            if let Some(source) = extract_between(line, &self.source_prefix, &self.source_suffix) {
                pending = Some(source);
            } else if let Some(target) =
                extract_between(line, &self.target_prefix, &self.target_suffix)
            {
                if let Some(source) = pending.take() {
                    pairs.push((source, target));
                }
            }
        }
        pairs
    }
}

fn extract_between(line: &str, prefix: &str, suffix: &str) -> Option<String> {
    let after = line.strip_prefix(prefix)?;
    let middle = after.strip_suffix(suffix)?;
    Some(middle.to_string())
}

/// Renders a batch body with each example's sides replaced by the
/// candidate's compressed versions.
pub fn render_compressed_body(
    batch: &EvalBatch,
    sides: &[(String, String)],
    frame: &str,
) -> Result<String, CompressionError> {
    let examples = replace_sides(batch, sides)?;
    Ok(render_batch_body(&examples, frame))
}

/// The batch with compressed texts substituted in. Spans are dropped (their
/// offsets no longer apply); ids, languages, and human scores survive.
pub(crate) fn replace_sides(
    batch: &EvalBatch,
    sides: &[(String, String)],
) -> Result<Vec<TranslationExample>, CompressionError> {
    if sides.len() != batch.len() {
        return Err(CompressionError::Shape(format!(
            "{} compressed examples for a batch of {}",
            sides.len(),
            batch.len()
        )));
    }
    Ok(batch
        .examples
        .iter()
        .zip(sides)
        .map(|(example, (source, target))| TranslationExample {
            id: example.id.clone(),
            source_lang: example.source_lang.clone(),
            target_lang: example.target_lang.clone(),
            source_text: source.clone(),
            target_text: target.clone(),
            human_score: example.human_score,
            spans: Vec::new(),
        })
        .collect())
}

/// splitmix64: stable per-index seed derivation.
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One stage-1 training record: the original batch body as the user turn,
/// the compressed body as the assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub messages: Vec<Message>,
    pub meta: Stage1Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Meta {
    pub ratio: f64,
    pub batch_size: usize,
    pub lang_pair: LangPair,
    pub seed: u64,
}

/// Streams `count` stage-1 records: per record, a uniformly sampled batch
/// size and compression ratio, a single language pair, and a seeded random
/// compression. Identical inputs produce identical streams.
pub fn generate_stage1<'a>(
    dataset: &'a Dataset,
    count: usize,
    config: &CompressionConfig,
    frame: &str,
) -> Result<Stage1Generator<'a>, CompressionError> {
    config.validate()?;
    if count < 1 {
        return Err(CompressionError::BadCount);
    }
    let pools: Vec<(LangPair, Vec<&'a TranslationExample>)> = dataset
        .by_lang_pair()
        .into_iter()
        .collect();
    if pools.is_empty() {
        return Err(CompressionError::BadConfig("dataset has no examples".into()));
    }
    Ok(Stage1Generator {
        pools,
        config: *config,
        frame: frame.to_string(),
        next: 0,
        count,
    })
}

pub struct Stage1Generator<'a> {
    pools: Vec<(LangPair, Vec<&'a TranslationExample>)>,
    config: CompressionConfig,
    frame: String,
    next: usize,
    count: usize,
}

impl Iterator for Stage1Generator<'_> {
    type Item = Stage1Record;

    fn next(&mut self) -> Option<Stage1Record> {
        if self.next >= self.count {
            return None;
        }
        let index = self.next;
        self.next += 1;

        // Each record draws from its own derived stream, so the output is a
        // pure function of (config, index).
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, index as u64));
        let size = rng.random_range(self.config.batch_size_min..=self.config.batch_size_max);
        let ratio = rng.random_range(self.config.ratio_min..=self.config.ratio_max);
        let (pair, pool) = &self.pools[rng.random_range(0..self.pools.len())];

        // Without replacement within a batch when the pool allows it.
        let examples: Vec<TranslationExample> = if pool.len() >= size {
            sample(&mut rng, pool.len(), size)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        } else {
            (0..size)
                .map(|_| pool[rng.random_range(0..pool.len())].clone())
                .collect()
        };
        let batch = EvalBatch::new(format!("s1-{index:06}"), examples).expect("pool is single-pair");

        let compression_seed = rng.random::<u64>();
        let candidate =
            random_compress(&batch, ratio, compression_seed).expect("ratio within config range");
        let original = render_batch_body(&batch.examples, &self.frame);
        let compressed =
            render_compressed_body(&batch, &candidate.compressed_examples, &self.frame)
                .expect("own candidate is aligned");

        Some(Stage1Record {
            messages: vec![
                Message::new(Role::User, original),
                Message::new(Role::Assistant, compressed),
            ],
            meta: Stage1Meta {
                ratio,
                batch_size: size,
                lang_pair: pair.clone(),
                seed: compression_seed,
            },
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count - self.next;
        (left, Some(left))
    }
}

/// Candidates plus diagnostics for seeds whose compression failed.
#[derive(Debug)]
pub struct CandidateSet {
    pub candidates: Vec<CompressionCandidate>,
    pub diagnostics: Vec<String>,
}

/// Samples `k` candidates with distinct seeds derived from `seed`. A
/// compressor failure drops that candidate with a diagnostic; shape
/// problems surface as `format_valid = false` instead.
pub async fn generate_candidates(
    batch: &EvalBatch,
    compressor: &dyn Compressor,
    k: usize,
    seed: u64,
) -> Result<CandidateSet, CompressionError> {
    if k < 2 {
        return Err(CompressionError::TooFewSeeds(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = Vec::with_capacity(k);
    while seeds.len() < k {
        let candidate_seed = rng.random::<u64>();
        if !seeds.contains(&candidate_seed) {
            seeds.push(candidate_seed);
        }
    }

    let mut candidates = Vec::with_capacity(k);
    let mut diagnostics = Vec::new();
    for candidate_seed in seeds {
        match compressor.compress(batch, candidate_seed).await {
            Ok(sides) => candidates.push(build_candidate(batch, sides, candidate_seed)),
            Err(error) => diagnostics.push(format!(
                "seed {candidate_seed:#018x} dropped: {error}"
            )),
        }
    }
    Ok(CandidateSet {
        candidates,
        diagnostics,
    })
}

/// Keeps format-valid candidates, order preserved.
pub fn filter_valid(candidates: Vec<CompressionCandidate>) -> Vec<CompressionCandidate> {
    candidates.into_iter().filter(|c| c.format_valid).collect()
}

/// Judges candidates by rendering the compressed batch as an evaluation
/// prompt and comparing the model's scores against human scores:
/// quality = −mean |llm − human|, with malformed examples contributing a
/// deviation of `weights.cap`.
pub struct CandidateJudge<'a> {
    pub client: &'a GatewayClient,
    pub template: &'a PromptTemplate,
    pub weights: SeverityWeights,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CandidateJudge<'_> {
    fn human_scores(batch: &EvalBatch) -> Result<Vec<f64>, CompressionError> {
        batch
            .examples
            .iter()
            .map(|e| {
                e.human_score
                    .ok_or_else(|| CompressionError::MissingHumanScore(e.id.clone()))
            })
            .collect()
    }

    fn build_request(
        &self,
        candidate: &CompressionCandidate,
        batch: &EvalBatch,
    ) -> Result<(CompletionRequest, crate::prompt::OutputSchema), CompressionError> {
        let tag = format!("{}-cand-{:016x}", batch.batch_id, candidate.generator_seed);
        let compressed = EvalBatch::new(
            tag.clone(),
            replace_sides(batch, &candidate.compressed_examples)?,
        )
        .map_err(|e| CompressionError::Shape(e.to_string()))?;

        // The oracle backend reads ground truth from the original batch,
        // registered under the candidate's tag.
        let original = EvalBatch::new(tag.clone(), batch.examples.clone())
            .map_err(|e| CompressionError::Shape(e.to_string()))?;
        self.client.backend().observe_batch(&tag, &original);

        let bundle = crate::prompt::render_batch_prompt(&compressed, self.template, &RuleTokenizer)?;
        let schema = bundle.schema.clone();
        let request = CompletionRequest {
            tag,
            messages: bundle.messages,
            model: self.client.backend().id(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            schema: self.client.backend().supports_schema().then_some(schema.clone()),
        };
        Ok((request, schema))
    }

    fn quality_from_response(
        &self,
        text: &str,
        schema: &crate::prompt::OutputSchema,
        human: &[f64],
    ) -> f64 {
        let parsed = parse_batch_response(text, schema);
        let deviations: f64 = parsed
            .outcomes
            .iter()
            .zip(human)
            .map(|(outcome, human_score)| match outcome.result.score(&self.weights) {
                Some(llm_score) => (llm_score - human_score).abs(),
                None => self.weights.cap,
            })
            .sum();
        -(deviations / human.len() as f64)
    }

    /// Quality of one candidate. Transport errors propagate; the candidate
    /// itself is never mutated.
    pub async fn judge(
        &self,
        candidate: &CompressionCandidate,
        batch: &EvalBatch,
    ) -> Result<f64, CompressionError> {
        let human = Self::human_scores(batch)?;
        let (request, schema) = self.build_request(candidate, batch)?;
        let response = self.client.complete(&request).await?;
        Ok(self.quality_from_response(&response.text, &schema, &human))
    }

    /// Judges all candidates concurrently (bounded by the client's
    /// `max_in_flight`), results aligned to the input order.
    pub async fn judge_many(
        &self,
        candidates: &[CompressionCandidate],
        batch: &EvalBatch,
    ) -> Result<Vec<Result<f64, CompressionError>>, CompressionError> {
        let human = Self::human_scores(batch)?;
        let mut requests = Vec::with_capacity(candidates.len());
        let mut schemas = Vec::with_capacity(candidates.len());
        for candidate in candidates {
            let (request, schema) = self.build_request(candidate, batch)?;
            requests.push(request);
            schemas.push(schema);
        }
        let responses = self.client.run_many(&requests).await;
        Ok(responses
            .into_iter()
            .zip(&schemas)
            .map(|(result, schema)| {
                result
                    .map(|response| self.quality_from_response(&response.text, schema, &human))
                    .map_err(CompressionError::from)
            })
            .collect())
    }
}

/// Best and worst compressed versions of one batch, for preference training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub batch_id: String,
    pub chosen: CompressionCandidate,
    pub rejected: CompressionCandidate,
    pub quality_chosen: f64,
    pub quality_rejected: f64,
}

/// Picks the pair: chosen maximizes (quality, fewest tokens, lowest seed);
/// rejected minimizes (quality, most tokens, highest seed). Permuting the
/// input never changes the selected identities.
pub fn select_pair(
    scored: &[(CompressionCandidate, f64)],
) -> Result<PreferencePair, CompressionError> {
    if scored.len() < 2 {
        return Err(CompressionError::TooFewCandidates(scored.len()));
    }
    // One total order serves both ends: quality ascending, then token count
    // descending, then seed descending. Maximum = chosen, minimum = rejected.
    let key = |entry: &(CompressionCandidate, f64)| {
        (
            entry.1,
            std::cmp::Reverse(entry.0.token_count),
            std::cmp::Reverse(entry.0.generator_seed),
        )
    };
    let compare = |a: &(CompressionCandidate, f64), b: &(CompressionCandidate, f64)| {
        let (qa, ta, sa) = key(a);
        let (qb, tb, sb) = key(b);
        qa.total_cmp(&qb).then(ta.cmp(&tb)).then(sa.cmp(&sb))
    };
    let chosen = scored.iter().max_by(|a, b| compare(a, b)).expect("non-empty");
    let rejected = scored.iter().min_by(|a, b| compare(a, b)).expect("non-empty");
    if compare(chosen, rejected) == std::cmp::Ordering::Equal {
        return Err(CompressionError::DegenerateCandidates);
    }
    Ok(PreferencePair {
        batch_id: chosen.0.batch_id.clone(),
        chosen: chosen.0.clone(),
        rejected: rejected.0.clone(),
        quality_chosen: chosen.1,
        quality_rejected: rejected.1,
    })
}

/// Groups a dataset's examples by language pair and samples `count`
/// batches, each with a size drawn uniformly from `size_range`; used by
/// pair-generation workflows that need whole batches with annotations.
/// Each batch is a pure function of (dataset, seed, index).
pub fn sample_annotated_batches(
    dataset: &Dataset,
    size_range: std::ops::RangeInclusive<usize>,
    count: usize,
    seed: u64,
) -> Result<Vec<EvalBatch>, CompressionError> {
    let (lo, hi) = (*size_range.start(), *size_range.end());
    if lo < 1 || lo > hi || count < 1 {
        return Err(CompressionError::BadConfig(
            "batch size range and count must be at least 1".into(),
        ));
    }
    let pools: Vec<(LangPair, Vec<&TranslationExample>)> =
        dataset.by_lang_pair().into_iter().collect();
    if pools.is_empty() {
        return Err(CompressionError::BadConfig("dataset has no examples".into()));
    }
    let mut batches = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
        let batch_size = rng.random_range(lo..=hi);
        let (_, pool) = &pools[rng.random_range(0..pools.len())];
        let examples: Vec<TranslationExample> = if pool.len() >= batch_size {
            sample(&mut rng, pool.len(), batch_size)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        } else {
            (0..batch_size)
                .map(|_| pool[rng.random_range(0..pool.len())].clone())
                .collect()
        };
        batches.push(EvalBatch::new(format!("pairs-{index:06}"), examples).expect("single pair"));
    }
    Ok(batches)
}

/// Map of per-pair meta fields serialized into stage-2 records.
pub type PairMeta = BTreeMap<String, serde_json::Value>;

/// The stage-2 output record: original body as prompt, best and worst
/// compressed bodies, and bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: PairMeta,
}

impl PairRecord {
    pub fn from_pair(
        pair: &PreferencePair,
        batch: &EvalBatch,
        frame: &str,
    ) -> Result<PairRecord, CompressionError> {
        let prompt = render_batch_body(&batch.examples, frame);
        let chosen = render_compressed_body(batch, &pair.chosen.compressed_examples, frame)?;
        let rejected = render_compressed_body(batch, &pair.rejected.compressed_examples, frame)?;
        let mut meta = PairMeta::new();
        meta.insert("batch_id".into(), serde_json::json!(pair.batch_id));
        meta.insert("quality_chosen".into(), serde_json::json!(pair.quality_chosen));
        meta.insert(
            "quality_rejected".into(),
            serde_json::json!(pair.quality_rejected),
        );
        meta.insert(
            "seed_chosen".into(),
            serde_json::json!(pair.chosen.generator_seed),
        );
        meta.insert(
            "seed_rejected".into(),
            serde_json::json!(pair.rejected.generator_seed),
        );
        Ok(PairRecord {
            prompt,
            chosen,
            rejected,
            meta,
        })
    }
}
