//! Tolerant parsing of batched evaluation responses.
//!
//! The contract that everything downstream leans on: for a batch of size n,
//! `parse_batch_response` returns exactly n outcomes, one per expected index
//! in ascending order, no matter what the input looks like. Damage is
//! attributed per example — a response that mangles one evaluation malforms
//! that slot and leaves the rest usable.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::mqm::{
    validate_category, CategoryValidation, PredictedError, Severity, SeverityWeights,
};
use crate::prompt::OutputSchema;

/// Why one example slot could not be scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformReason {
    /// No parseable top-level JSON evaluations structure in the response.
    NoTopLevelJson,
    /// The response carried no evaluation for this index.
    MissingIndex,
    /// The response carried two or more evaluations for this index.
    DuplicateIndex,
    /// An error entry was structurally broken (not an object, missing or
    /// non-string fields, errors not an array).
    BadErrorObject,
    /// An error entry named a severity outside minor/major/critical.
    WrongSeverity,
}

impl MalformReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            MalformReason::NoTopLevelJson => "no_top_level_json",
            MalformReason::MissingIndex => "missing_index",
            MalformReason::DuplicateIndex => "duplicate_index",
            MalformReason::BadErrorObject => "bad_error_object",
            MalformReason::WrongSeverity => "wrong_severity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExampleResult {
    Parsed { errors: Vec<PredictedError> },
    Malformed { reason: MalformReason },
}

impl ExampleResult {
    pub fn is_malformed(&self) -> bool {
        matches!(self, ExampleResult::Malformed { .. })
    }

    /// Score under `weights`; `None` when malformed.
    pub fn score(&self, weights: &SeverityWeights) -> Option<f64> {
        match self {
            ExampleResult::Parsed { errors } => {
                Some(crate::mqm::score_from_errors(errors, weights))
            }
            ExampleResult::Malformed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub index: usize,
    #[serde(flatten)]
    pub result: ExampleResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    /// Exactly one outcome per expected index, ascending.
    pub outcomes: Vec<ExampleOutcome>,
    /// Human-readable notes about tolerated damage (ignored out-of-range
    /// indices, unknown categories, unattributable entries).
    pub diagnostics: Vec<String>,
}

impl ParsedResponse {
    pub fn malformed_count(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.result.is_malformed())
            .count()
    }
}

/// Scores per slot in index order; `None` for malformed slots.
pub fn outcomes_to_scores(outcomes: &[ExampleOutcome], weights: &SeverityWeights) -> Vec<Option<f64>> {
    outcomes.iter().map(|o| o.result.score(weights)).collect()
}

/// Finds the first balanced JSON value (object or array) in `text`,
/// tolerating code fences and prose around it. String contents and escapes
/// are honored, so braces inside quoted spans never confuse the scan. A
/// candidate must also parse as JSON; otherwise the search continues from
/// the next opener. Idempotent: running it on its own output is a no-op.
pub fn strip_wrappers(text: &str) -> String {
    match extract_json(text) {
        Some((slice, _)) => slice.to_string(),
        None => text.trim().to_string(),
    }
}

fn extract_json(text: &str) -> Option<(&str, Value)> {
    let bytes = text.as_bytes();
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(['{', '[']) {
        let start = search_from + rel;
        if let Some(end) = balanced_end(bytes, start) {
            let candidate = &text[start..end];
            if let Ok(value) = serde_json::from_str::<Value>(candidate) {
                return Some((candidate, value));
            }
        }
        search_from = start + 1;
    }
    None
}

/// Byte offset one past the closer matching the opener at `start`, or None.
/// The input is valid UTF-8 and every byte we branch on is ASCII, so byte
/// scanning is safe.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut stack: Vec<u8> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    let mut i = start;
    while i < bytes.len() {
        let b = bytes[i];
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
        } else {
            match b {
                b'"' => in_string = true,
                b'{' | b'[' => stack.push(b),
                b'}' | b']' => {
                    let expected = if b == b'}' { b'{' } else { b'[' };
                    if stack.pop() != Some(expected) {
                        return None;
                    }
                    if stack.is_empty() {
                        return Some(i + 1);
                    }
                }
                _ => {}
            }
        }
        i += 1;
    }
    None
}

/// Parses a batched evaluation response against `schema`.
///
/// Accepts the canonical `{"evaluations": [...]}` object or a bare array of
/// evaluation objects. Indices may be JSON integers or integer strings.
/// Duplicate indices malform their slot (no first-wins), out-of-range
/// indices are ignored with a diagnostic, and indices the response never
/// covers come back as `missing_index`.
pub fn parse_batch_response(text: &str, schema: &OutputSchema) -> ParsedResponse {
    let n = schema.batch_size();
    let mut diagnostics = Vec::new();

    let evaluations = match extract_evaluations(text, &mut diagnostics) {
        Some(items) => items,
        None => {
            return ParsedResponse {
                outcomes: all_malformed(n, MalformReason::NoTopLevelJson),
                diagnostics,
            };
        }
    };

    // One slot per expected index; a slot may be overwritten only by the
    // duplicate marker.
    let mut slots: Vec<Option<ExampleResult>> = vec![None; n];
    let mut duplicated: Vec<bool> = vec![false; n];

    for (position, item) in evaluations.iter().enumerate() {
        let obj = match item.as_object() {
            Some(obj) => obj,
            None => {
                diagnostics.push(format!(
                    "evaluation at position {position} is not an object; skipped"
                ));
                continue;
            }
        };
        let index = match read_index(obj.get("index")) {
            Some(index) => index,
            None => {
                diagnostics.push(format!(
                    "evaluation at position {position} has no usable index; skipped"
                ));
                continue;
            }
        };
        if index >= n {
            diagnostics.push(format!(
                "evaluation index {index} is outside the batch of {n}; ignored"
            ));
            continue;
        }
        if slots[index].is_some() || duplicated[index] {
            duplicated[index] = true;
            slots[index] = Some(ExampleResult::Malformed {
                reason: MalformReason::DuplicateIndex,
            });
            diagnostics.push(format!("index {index} appears more than once"));
            continue;
        }
        slots[index] = Some(parse_errors_field(obj.get("errors"), index, &mut diagnostics));
    }

    let outcomes = slots
        .into_iter()
        .enumerate()
        .map(|(index, slot)| ExampleOutcome {
            index,
            result: slot.unwrap_or(ExampleResult::Malformed {
                reason: MalformReason::MissingIndex,
            }),
        })
        .collect();

    ParsedResponse {
        outcomes,
        diagnostics,
    }
}

fn all_malformed(n: usize, reason: MalformReason) -> Vec<ExampleOutcome> {
    (0..n)
        .map(|index| ExampleOutcome {
            index,
            result: ExampleResult::Malformed { reason },
        })
        .collect()
}

fn extract_evaluations(text: &str, diagnostics: &mut Vec<String>) -> Option<Vec<Value>> {
    let (_, value) = match extract_json(text) {
        Some(found) => found,
        None => {
            diagnostics.push("no balanced JSON value in response".into());
            return None;
        }
    };
    match value {
        Value::Array(items) => Some(items),
        Value::Object(mut map) => match map.remove("evaluations") {
            Some(Value::Array(items)) => Some(items),
            Some(_) => {
                diagnostics.push("evaluations key is not an array".into());
                None
            }
            None => {
                diagnostics.push("top-level object has no evaluations key".into());
                None
            }
        },
        _ => {
            diagnostics.push("top-level JSON is neither object nor array".into());
            None
        }
    }
}

fn read_index(value: Option<&Value>) -> Option<usize> {
    match value? {
        Value::Number(num) => num.as_u64().map(|v| v as usize),
        Value::String(s) => s.trim().parse::<usize>().ok(),
        _ => None,
    }
}

/// Parses one evaluation's `errors` array. The first broken entry decides
/// the slot's malform reason; entries are read in order.
fn parse_errors_field(
    errors: Option<&Value>,
    index: usize,
    diagnostics: &mut Vec<String>,
) -> ExampleResult {
    let items = match errors.and_then(Value::as_array) {
        Some(items) => items,
        None => {
            return ExampleResult::Malformed {
                reason: MalformReason::BadErrorObject,
            };
        }
    };

    let mut parsed = Vec::with_capacity(items.len());
    for item in items {
        match parse_one_error(item, index, diagnostics) {
            Ok(error) => parsed.push(error),
            Err(reason) => return ExampleResult::Malformed { reason },
        }
    }
    ExampleResult::Parsed { errors: parsed }
}

fn parse_one_error(
    item: &Value,
    index: usize,
    diagnostics: &mut Vec<String>,
) -> Result<PredictedError, MalformReason> {
    let obj = item.as_object().ok_or(MalformReason::BadErrorObject)?;

    let severity_raw = obj
        .get("severity")
        .and_then(Value::as_str)
        .ok_or(MalformReason::BadErrorObject)?;
    let severity = Severity::parse_lenient(severity_raw).ok_or(MalformReason::WrongSeverity)?;

    let category = obj
        .get("category")
        .and_then(Value::as_str)
        .ok_or(MalformReason::BadErrorObject)?
        .to_string();
    if let CategoryValidation::Unknown { nearest, .. } = validate_category(&category) {
        diagnostics.push(format!(
            "index {index}: category {category:?} is not canonical (nearest: {nearest})"
        ));
    }

    let span_text = match obj.get("span") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(MalformReason::BadErrorObject),
    };

    Ok(PredictedError {
        severity,
        category,
        span_text,
    })
}
