//! Scripted in-process backend for hermetic runs.
//!
//! A JSON script controls behavior. In `oracle` mode the backend answers
//! each batch with the reference errors of its examples (shown to it via
//! `observe_batch`), optionally sabotaged by a malformation injector.
//! Every random choice derives from `(script seed, request tag)` alone, so
//! transcripts are byte-identical regardless of concurrency or scheduling
//! order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{http::local_usage, Backend, CompletionRequest, CompletionResponse, GatewayError, UsageRecord};
use crate::dataset::EvalBatch;
use crate::mqm::{PredictedError, Side, TranslationExample};
use crate::prompt::{EvaluationRecord, EvaluationsPayload};
use crate::tokenizer::{RuleTokenizer, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    /// Answer with each example's reference errors.
    #[default]
    Oracle,
    /// Answer with an empty error list for every example.
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformKind {
    /// Cut the response text off mid-JSON.
    Truncate,
    /// Answer with prose containing no JSON at all.
    Prose,
    /// Remove the evaluation objects of the victim indices.
    DropIndex,
    /// Append a second evaluation object for the victim indices.
    DuplicateIndex,
    /// Replace the victims' errors array with a number.
    BadErrorObject,
}

impl MalformKind {
    /// Whole-response kinds damage the entire reply; per-example kinds pick
    /// exactly `round(rate * batch_size)` victim indices.
    pub fn is_whole_response(&self) -> bool {
        matches!(self, MalformKind::Truncate | MalformKind::Prose)
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct MalformSpec {
    pub kind: MalformKind,
    pub rate: f64,
}

fn default_model() -> String {
    "mock".into()
}

fn default_report_usage() -> bool {
    true
}

/// Script file contents. All fields optional except none.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub default_mode: MockMode,
    /// Exact response text per request tag, overriding everything else.
    #[serde(default)]
    pub verbatim: BTreeMap<String, String>,
    /// Fail the first N attempts for a tag with a transport error.
    #[serde(default)]
    pub fail_first: BTreeMap<String, u32>,
    #[serde(default)]
    pub malform: Option<MalformSpec>,
    /// When false the response omits usage, forcing local counting.
    #[serde(default = "default_report_usage")]
    pub report_usage: bool,
    #[serde(default)]
    pub latency_ms: u64,
}

impl MockScript {
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Script(format!("reading script {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let script: MockScript = serde_json::from_str(text)
            .map_err(|e| GatewayError::Script(format!("parsing script: {e}")))?;
        if let Some(malform) = &script.malform {
            if !(0.0..=1.0).contains(&malform.rate) || !malform.rate.is_finite() {
                return Err(GatewayError::Script(format!(
                    "malform rate must be within [0, 1], got {}",
                    malform.rate
                )));
            }
        }
        Ok(script)
    }
}

pub struct MockBackend {
    script: MockScript,
    /// Ground truth per request tag, registered through `observe_batch`.
    observed: Mutex<BTreeMap<String, Vec<Vec<PredictedError>>>>,
    /// Remaining scripted failures per tag.
    failures_left: Mutex<BTreeMap<String, u32>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let failures_left = Mutex::new(script.fail_first.clone());
        MockBackend {
            script,
            observed: Mutex::new(BTreeMap::new()),
            failures_left,
        }
    }

    pub fn from_script_file(path: &Path) -> Result<Self, GatewayError> {
        Ok(Self::new(MockScript::from_file(path)?))
    }

    /// The reference evaluation for one example: its annotated spans in the
    /// output format. Target-side spans quote the target text; source-side
    /// spans (omissions) map to an empty quote.
    pub fn reference_errors(example: &TranslationExample) -> Vec<PredictedError> {
        example
            .spans
            .iter()
            .map(|span| {
                let span_text = match span.side {
                    Side::Target => example
                        .target_text
                        .chars()
                        .skip(span.start_char)
                        .take(span.end_char - span.start_char)
                        .collect(),
                    Side::Source => String::new(),
                };
                PredictedError {
                    severity: span.severity,
                    category: span.category.clone(),
                    span_text,
                }
            })
            .collect()
    }

    fn render_payload(&self, errors_per_example: &[Vec<PredictedError>]) -> String {
        let payload = EvaluationsPayload {
            evaluations: errors_per_example
                .iter()
                .enumerate()
                .map(|(index, errors)| EvaluationRecord {
                    index,
                    errors: errors.clone(),
                })
                .collect(),
        };
        payload.to_json()
    }

    fn sabotage(&self, text: String, tag: &str, n: usize, spec: &MalformSpec) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(self.script.seed, tag));
        if spec.kind.is_whole_response() {
            if !hit(&mut rng, spec.rate) {
                return text;
            }
            return match spec.kind {
                MalformKind::Truncate => truncate_at_fraction(&text, 0.6),
                MalformKind::Prose => {
                    "I'm sorry, but I cannot provide evaluations for this batch.".into()
                }
                _ => unreachable!(),
            };
        }

        let victim_count = (spec.rate * n as f64).round() as usize;
        if victim_count == 0 {
            return text;
        }
        let mut victims: Vec<usize> = sample(&mut rng, n, victim_count.min(n)).into_vec();
        victims.sort_unstable();

        let mut value: serde_json::Value = serde_json::from_str(&text).expect("own payload");
        let evaluations = value["evaluations"].as_array_mut().expect("own payload");
        match spec.kind {
            MalformKind::DropIndex => {
                evaluations.retain(|e| {
                    let index = e["index"].as_u64().expect("own payload") as usize;
                    !victims.contains(&index)
                });
            }
            MalformKind::DuplicateIndex => {
                let copies: Vec<serde_json::Value> = evaluations
                    .iter()
                    .filter(|e| {
                        let index = e["index"].as_u64().expect("own payload") as usize;
                        victims.contains(&index)
                    })
                    .cloned()
                    .collect();
                evaluations.extend(copies);
            }
            MalformKind::BadErrorObject => {
                for entry in evaluations.iter_mut() {
                    let index = entry["index"].as_u64().expect("own payload") as usize;
                    if victims.contains(&index) {
                        entry["errors"] = serde_json::json!(42);
                    }
                }
            }
            MalformKind::Truncate | MalformKind::Prose => unreachable!(),
        }
        value.to_string()
    }
}

/// FNV-1a over the seed bytes then the tag bytes.
fn tag_seed(seed: u64, tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in seed.to_le_bytes().iter().chain(tag.as_bytes()) {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn hit(rng: &mut ChaCha8Rng, rate: f64) -> bool {
    use rand::Rng;
    rng.random::<f64>() < rate
}

/// Cuts at the given fraction of bytes, snapped back to a char boundary.
fn truncate_at_fraction(text: &str, fraction: f64) -> String {
    let mut cut = (text.len() as f64 * fraction) as usize;
    while cut > 0 && !text.is_char_boundary(cut) {
        cut -= 1;
    }
    text[..cut].to_string()
}

#[async_trait]
impl Backend for MockBackend {
    fn id(&self) -> String {
        self.script.model.clone()
    }

    fn observe_batch(&self, tag: &str, batch: &EvalBatch) {
        let truth = batch
            .examples
            .iter()
            .map(Self::reference_errors)
            .collect();
        self.observed.lock().unwrap().insert(tag.to_string(), truth);
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        if self.script.latency_ms > 0 {
            tokio::time::sleep(std::time::Duration::from_millis(self.script.latency_ms)).await;
        }

        {
            let mut failures = self.failures_left.lock().unwrap();
            if let Some(left) = failures.get_mut(&request.tag) {
                if *left > 0 {
                    *left -= 1;
                    return Err(GatewayError::Transport(format!(
                        "scripted failure for {}",
                        request.tag
                    )));
                }
            }
        }

        let text = if let Some(verbatim) = self.script.verbatim.get(&request.tag) {
            verbatim.clone()
        } else {
            let truth = {
                let observed = self.observed.lock().unwrap();
                observed.get(&request.tag).cloned().ok_or_else(|| {
                    GatewayError::Script(format!(
                        "no batch observed for tag {:?}; call observe_batch first",
                        request.tag
                    ))
                })?
            };
            let errors_per_example: Vec<Vec<PredictedError>> = match self.script.default_mode {
                MockMode::Oracle => truth,
                MockMode::Empty => vec![Vec::new(); truth.len()],
            };
            let n = errors_per_example.len();
            let text = self.render_payload(&errors_per_example);
            match &self.script.malform {
                Some(spec) => self.sabotage(text, &request.tag, n, spec),
                None => text,
            }
        };

        let usage = if self.script.report_usage {
            let prompt: String = request
                .messages
                .iter()
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .concat();
            UsageRecord {
                prompt_tokens: RuleTokenizer.count(&prompt) as u64,
                completion_tokens: RuleTokenizer.count(&text) as u64,
                locally_counted: false,
            }
        } else {
            local_usage(request, &text)
        };

        Ok(CompletionResponse {
            text,
            usage,
            attempts: 1,
        })
    }
}
