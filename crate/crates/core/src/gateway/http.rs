//! Chat-completions HTTP backend.
//!
//! Speaks the common `POST <base>/chat/completions` dialect: request body
//! `{model, messages, temperature, max_tokens, response_format?}`, response
//! read from `choices[0].message.content` with token usage from
//! `usage.prompt_tokens`/`usage.completion_tokens`. Providers that omit
//! usage get local token counts, flagged as such.

use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;

use super::{Backend, CompletionRequest, CompletionResponse, GatewayError, UsageRecord};
use crate::tokenizer::{RuleTokenizer, Tokenizer};

/// Environment variable holding the bearer token, if the provider wants one.
pub const API_KEY_ENV: &str = "BATCHGEMBA_API_KEY";

pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
    model: String,
    use_schema: bool,
}

impl HttpBackend {
    /// `base_url` is the provider root, e.g. `https://api.example.com/v1`;
    /// the chat-completions path is appended. The API key is read from
    /// `BATCHGEMBA_API_KEY` when present.
    pub fn new(base_url: &str, model: &str, use_schema: bool) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(300))
            .connect_timeout(Duration::from_secs(20))
            .build()
            .map_err(|e| GatewayError::Transport(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: std::env::var(API_KEY_ENV).ok(),
            model: model.to_string(),
            use_schema,
        })
    }

    fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if self.use_schema {
            if let Some(schema) = &request.schema {
                body["response_format"] = serde_json::json!({
                    "type": "json_schema",
                    "json_schema": {
                        "name": "batch_evaluations",
                        "strict": true,
                        "schema": schema.to_json_schema(),
                    }
                });
            }
        }
        body
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[async_trait]
impl Backend for HttpBackend {
    fn id(&self) -> String {
        self.model.clone()
    }

    fn supports_schema(&self) -> bool {
        self.use_schema
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        let mut http = self.client.post(&self.endpoint).json(&self.body(request));
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }

        let response = http
            .send()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;

        let status = response.status().as_u16();
        let body = response
            .text()
            .await
            .map_err(|e| GatewayError::Transport(format!("reading body: {e}")))?;

        if (400..500).contains(&status) {
            return Err(GatewayError::Config {
                status,
                message: snippet(&body),
            });
        }
        if status >= 500 {
            return Err(GatewayError::Server {
                status,
                message: snippet(&body),
            });
        }

        let wire: WireResponse = serde_json::from_str(&body)
            .map_err(|e| GatewayError::Transport(format!("unparseable provider response: {e}")))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::Transport("provider response has no choices".into()))?;

        let usage = match wire.usage {
            Some(u) => UsageRecord {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
                locally_counted: false,
            },
            None => local_usage(request, &text),
        };

        Ok(CompletionResponse {
            text,
            usage,
            attempts: 1,
        })
    }
}

/// Token usage reconstructed with the rule tokenizer when the provider does
/// not report one.
pub fn local_usage(request: &CompletionRequest, response_text: &str) -> UsageRecord {
    let prompt: String = request
        .messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .concat();
    UsageRecord {
        prompt_tokens: RuleTokenizer.count(&prompt) as u64,
        completion_tokens: RuleTokenizer.count(response_text) as u64,
        locally_counted: true,
    }
}

fn snippet(body: &str) -> String {
    let trimmed = body.trim();
    let mut end = trimmed.len().min(300);
    while !trimmed.is_char_boundary(end) {
        end -= 1;
    }
    trimmed[..end].to_string()
}
