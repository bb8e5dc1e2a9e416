//! Provider gateway: a `Backend` trait over chat-completion providers, a
//! retrying client with bounded concurrency, and usage accounting.

pub mod http;
pub mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EvalBatch;
use crate::prompt::{Message, OutputSchema};

#[derive(Debug, Error)]
pub enum GatewayError {
    /// The provider rejected the request as ours to fix (4xx). Not retried.
    #[error("provider rejected request (status {status}): {message}")]
    Config { status: u16, message: String },
    /// Network-level failure: connect, timeout, or a broken response
    /// envelope. Retried.
    #[error("transport failure: {0}")]
    Transport(String),
    /// Provider-side failure (5xx). Retried.
    #[error("provider error (status {status}): {message}")]
    Server { status: u16, message: String },
    /// Retries ran out; carries the final underlying failure.
    #[error("request failed after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        #[source]
        last: Box<GatewayError>,
    },
    /// A scripted backend was driven outside its script. Not retried.
    #[error("backend script error: {0}")]
    Script(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::Server { .. })
    }
}

/// Token usage for one completed request. `locally_counted` marks totals the
/// provider did not report, reconstructed with the rule tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UsageRecord {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub locally_counted: bool,
}

impl UsageRecord {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    /// Stable identifier for this request (the batch id). Scripted backends
    /// key all per-request behavior on it, so results are independent of
    /// scheduling order.
    pub tag: String,
    pub messages: Vec<Message>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// When present and the backend supports it, the backend asks the
    /// provider to constrain decoding to this schema.
    pub schema: Option<OutputSchema>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub text: String,
    pub usage: UsageRecord,
    /// Attempts consumed, counting the successful one.
    pub attempts: u32,
}

/// A chat-completion provider.
#[async_trait]
pub trait Backend: Send + Sync {
    /// Identifier recorded in run artifacts (typically the model name).
    fn id(&self) -> String;

    /// Whether requests may carry a response schema for constrained decoding.
    fn supports_schema(&self) -> bool {
        false
    }

    /// Shows the backend the batch a request was rendered from, keyed by the
    /// request tag. Callers invoke it before `complete` for every batch;
    /// real providers ignore it, scripted oracles read the ground truth.
    fn observe_batch(&self, _tag: &str, _batch: &EvalBatch) {}

    /// One attempt. Retrying is the client's job.
    async fn complete(&self, request: &CompletionRequest)
        -> Result<CompletionResponse, GatewayError>;
}

/// Exponential backoff: base, doubled per attempt, capped.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before the attempt after `failed_attempts` failures.
    pub fn delay(&self, failed_attempts: u32) -> Duration {
        let factor = 1u32 << failed_attempts.saturating_sub(1).min(16);
        (self.base_delay * factor).min(self.max_delay)
    }
}

/// Retrying client over a backend, with bounded request concurrency and
/// running usage totals.
pub struct GatewayClient {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    max_in_flight: usize,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

impl GatewayClient {
    /// `max_in_flight` must be at least 1.
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        assert!(max_in_flight >= 1, "max_in_flight must be at least 1");
        GatewayClient {
            backend,
            retry,
            max_in_flight,
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
        }
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    /// (prompt, completion) tokens across all successful requests so far.
    pub fn usage_totals(&self) -> (u64, u64) {
        (
            self.prompt_tokens.load(Ordering::Relaxed),
            self.completion_tokens.load(Ordering::Relaxed),
        )
    }

    /// Completes one request, retrying retryable failures with backoff.
    pub async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.backend.complete(request).await {
                Ok(mut response) => {
                    response.attempts = attempt;
                    self.prompt_tokens
                        .fetch_add(response.usage.prompt_tokens, Ordering::Relaxed);
                    self.completion_tokens
                        .fetch_add(response.usage.completion_tokens, Ordering::Relaxed);
                    return Ok(response);
                }
                Err(error) if error.is_retryable() && attempt < self.retry.max_attempts => {
                    tokio::time::sleep(self.retry.delay(attempt)).await;
                }
                Err(error) if error.is_retryable() => {
                    return Err(GatewayError::Exhausted {
                        attempts: attempt,
                        last: Box::new(error),
                    });
                }
                Err(error) => return Err(error),
            }
        }
    }

    /// Runs all requests with at most `max_in_flight` concurrently in
    /// flight. Results come back in input order, one slot per request;
    /// a failed request never disturbs its neighbors.
    pub async fn run_many(
        &self,
        requests: &[CompletionRequest],
    ) -> Vec<Result<CompletionResponse, GatewayError>> {
        futures::stream::iter(requests.iter().map(|request| self.complete(request)))
            .buffered(self.max_in_flight)
            .collect()
            .await
    }
}
