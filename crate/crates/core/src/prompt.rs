//! Batched evaluation prompt rendering and token accounting.
//!
//! A rendered prompt carries the shared sections exactly once regardless of
//! batch size: instruction, a three-example demonstration mini-batch, the
//! demonstration's JSON evaluations as an assistant turn, then the target
//! batch framed per example with explicit indices and the output
//! instructions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EvalBatch;
use crate::mqm::{PredictedError, TranslationExample};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("batch must contain at least one example")]
    EmptyBatch,
    #[error("template must carry exactly 3 few-shot examples, got {0}")]
    FewshotCount(usize),
    #[error("per-example frame is missing placeholder {0}")]
    MissingPlaceholder(&'static str),
    #[error("batch size must be at least 1, got {0}")]
    BadBatchSize(usize),
    #[error("failed to read template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template is not valid JSON: {0}")]
    TemplateParse(#[from] serde_json::Error),
}

/// Chat role of one prompt message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

/// One demonstration: an example plus its reference evaluation in the exact
/// output format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotEntry {
    pub example: FewshotExample,
    pub evaluation: Vec<PredictedError>,
}

/// The translation pair shown in a demonstration. Stored without dataset
/// bookkeeping (id, human score) because rendering needs none of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotExample {
    pub src_lang: String,
    pub tgt_lang: String,
    pub source: String,
    pub target: String,
}

pub const FRAME_PLACEHOLDERS: [&str; 5] =
    ["{index}", "{src_lang}", "{tgt_lang}", "{source}", "{target}"];

/// Prompt template: instruction, three demonstrations, the per-example
/// frame, and output instructions.
///
/// The file form is JSON with keys `instruction`, `fewshot` (3 entries of
/// `example` and `evaluation`), `frame`, and `output_instructions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(rename = "instruction")]
    pub instruction_text: String,
    #[serde(rename = "fewshot")]
    pub fewshot_examples: Vec<FewshotEntry>,
    #[serde(rename = "frame")]
    pub per_example_frame: String,
    pub output_instructions: String,
}

pub const DEFAULT_TEMPLATE_JSON: &str = include_str!("../assets/default_template.json");

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.fewshot_examples.len() != 3 {
            return Err(PromptError::FewshotCount(self.fewshot_examples.len()));
        }
        for placeholder in FRAME_PLACEHOLDERS {
            if !self.per_example_frame.contains(placeholder) {
                return Err(PromptError::MissingPlaceholder(placeholder));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let template: PromptTemplate = serde_json::from_str(text)?;
        template.validate()?;
        Ok(template)
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::TemplateIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The template shipped with the crate.
    pub fn shipped_default() -> Self {
        Self::from_json(DEFAULT_TEMPLATE_JSON).expect("bundled template is valid")
    }

    /// Renders the frame for one example at the given batch index.
    pub fn frame_example(&self, index: usize, example: &TranslationExample) -> String {
        render_frame(
            &self.per_example_frame,
            index,
            &example.source_lang,
            &example.target_lang,
            &example.source_text,
            &example.target_text,
        )
    }
}

fn render_frame(
    frame: &str,
    index: usize,
    src_lang: &str,
    tgt_lang: &str,
    source: &str,
    target: &str,
) -> String {
    frame
        .replace("{index}", &index.to_string())
        .replace("{src_lang}", src_lang)
        .replace("{tgt_lang}", tgt_lang)
        .replace("{source}", source)
        .replace("{target}", target)
}

/// Frames a slice of examples at indices `0..n`, blocks separated by blank
/// lines. This is also the text a batch compressor consumes and emits.
pub fn render_batch_body(examples: &[TranslationExample], frame: &str) -> String {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            render_frame(
                frame,
                i,
                &ex.source_lang,
                &ex.target_lang,
                &ex.source_text,
                &ex.target_text,
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Declares the output expected for a batch: one evaluation object per
/// index, indices contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSchema {
    batch_size: usize,
}

impl OutputSchema {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn expected_indices(&self) -> Vec<usize> {
        (0..self.batch_size).collect()
    }

    /// JSON Schema for schema-constrained decoding backends.
    pub fn to_json_schema(&self) -> serde_json::Value {
        serde_json::json!({
            "type": "object",
            "properties": {
                "evaluations": {
                    "type": "array",
                    "minItems": self.batch_size,
                    "maxItems": self.batch_size,
                    "items": {
                        "type": "object",
                        "properties": {
                            "index": {"type": "integer", "minimum": 0, "maximum": self.batch_size - 1},
                            "errors": {
                                "type": "array",
                                "items": {
                                    "type": "object",
                                    "properties": {
                                        "severity": {"type": "string", "enum": ["minor", "major", "critical"]},
                                        "category": {"type": "string"},
                                        "span": {"type": "string"}
                                    },
                                    "required": ["severity", "category"]
                                }
                            }
                        },
                        "required": ["index", "errors"]
                    }
                }
            },
            "required": ["evaluations"]
        })
    }
}

/// Schema demanding exactly `batch_size` evaluations with contiguous indices.
pub fn schema_for(batch_size: usize) -> Result<OutputSchema, PromptError> {
    if batch_size < 1 {
        return Err(PromptError::BadBatchSize(batch_size));
    }
    Ok(OutputSchema { batch_size })
}

/// One evaluation object in the output format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub index: usize,
    pub errors: Vec<PredictedError>,
}

/// The top-level output object a model must produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationsPayload {
    pub evaluations: Vec<EvaluationRecord>,
}

impl EvaluationsPayload {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("payload serializes")
    }
}

/// A rendered prompt: messages, token accounting, and the schema its output
/// must satisfy.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub messages: Vec<Message>,
    pub token_count: usize,
    pub batch_size: usize,
    pub compressed: bool,
    pub schema: OutputSchema,
}

impl PromptBundle {
    /// Concatenation of all message contents, the basis of `token_count`.
    pub fn concatenated(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .concat()
    }
}

/// Renders the batched evaluation prompt for `batch`.
///
/// Message order: instruction (system), demonstration mini-batch (user),
/// demonstration evaluations in the exact output format (assistant), target
/// batch frames plus output instructions (user).
pub fn render_batch_prompt(
    batch: &EvalBatch,
    template: &PromptTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<PromptBundle, PromptError> {
    if batch.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    template.validate()?;

    let demo_frames: Vec<String> = template
        .fewshot_examples
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            render_frame(
                &template.per_example_frame,
                i,
                &entry.example.src_lang,
                &entry.example.tgt_lang,
                &entry.example.source,
                &entry.example.target,
            )
        })
        .collect();

    let demo_payload = EvaluationsPayload {
        evaluations: template
            .fewshot_examples
            .iter()
            .enumerate()
            .map(|(i, entry)| EvaluationRecord {
                index: i,
                errors: entry.evaluation.clone(),
            })
            .collect(),
    };

    let target_body = render_batch_body(&batch.examples, &template.per_example_frame);

    let messages = vec![
        Message::new(Role::System, template.instruction_text.clone()),
        Message::new(Role::User, demo_frames.join("\n\n")),
        Message::new(Role::Assistant, demo_payload.to_json()),
        Message::new(
            Role::User,
            format!("{target_body}\n\n{}", template.output_instructions),
        ),
    ];

    let concatenated: String = messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .concat();
    let token_count = tokenizer.count(&concatenated);

    Ok(PromptBundle {
        messages,
        token_count,
        batch_size: batch.len(),
        compressed: false,
        schema: OutputSchema {
            batch_size: batch.len(),
        },
    })
}
