//! MQM domain types and severity-weighted segment scoring.
//!
//! An annotated segment carries error spans with a severity and an MQM
//! category; its quality score is the negated, capped, severity-weighted
//! penalty sum. Weights follow the GEMBA-MQM convention (minor 1, major 5,
//! critical 25, capped at 25) and are configurable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which side of a translation pair a span refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

/// MQM error severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Minor,
    Major,
    Critical,
}

impl Severity {
    /// Case-insensitive parse after trimming. `None` for anything that is
    /// not exactly one of the three severities.
    pub fn parse_lenient(s: &str) -> Option<Severity> {
        match s.trim().to_lowercase().as_str() {
            "minor" => Some(Severity::Minor),
            "major" => Some(Severity::Major),
            "critical" => Some(Severity::Critical),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum MqmError {
    #[error("span [{start}, {end}) out of bounds for {side:?} text of length {len}")]
    SpanOutOfBounds {
        side: Side,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("span start {start} must be less than end {end}")]
    EmptySpan { start: usize, end: usize },
    #[error("{field} text must be non-empty")]
    EmptyText { field: &'static str },
    #[error("invalid severity weights: {0}")]
    InvalidWeights(String),
}

/// A contiguous character range marked as erroneous by a human annotator.
///
/// Offsets count Unicode scalar values, `start_char` inclusive and
/// `end_char` exclusive, against the text of the referenced side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSpan {
    pub side: Side,
    #[serde(rename = "start")]
    pub start_char: usize,
    #[serde(rename = "end")]
    pub end_char: usize,
    pub severity: Severity,
    pub category: String,
}

impl ErrorSpan {
    /// Bounds check against the text of the span's side.
    pub fn validate(&self, source_text: &str, target_text: &str) -> Result<(), MqmError> {
        if self.start_char >= self.end_char {
            return Err(MqmError::EmptySpan {
                start: self.start_char,
                end: self.end_char,
            });
        }
        let len = match self.side {
            Side::Source => source_text.chars().count(),
            Side::Target => target_text.chars().count(),
        };
        if self.end_char > len {
            return Err(MqmError::SpanOutOfBounds {
                side: self.side,
                start: self.start_char,
                end: self.end_char,
                len,
            });
        }
        Ok(())
    }
}

/// One source/translation pair with optional human MQM score and annotated
/// error spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationExample {
    pub id: String,
    #[serde(rename = "src_lang")]
    pub source_lang: String,
    #[serde(rename = "tgt_lang")]
    pub target_lang: String,
    #[serde(rename = "source")]
    pub source_text: String,
    #[serde(rename = "target")]
    pub target_text: String,
    #[serde(default)]
    pub human_score: Option<f64>,
    #[serde(default)]
    pub spans: Vec<ErrorSpan>,
}

impl TranslationExample {
    /// Checks text non-emptiness and every span's bounds.
    pub fn validate(&self) -> Result<(), MqmError> {
        if self.source_text.is_empty() {
            return Err(MqmError::EmptyText { field: "source" });
        }
        if self.target_text.is_empty() {
            return Err(MqmError::EmptyText { field: "target" });
        }
        for span in &self.spans {
            span.validate(&self.source_text, &self.target_text)?;
        }
        Ok(())
    }

    /// The text of the given side.
    pub fn text(&self, side: Side) -> &str {
        match side {
            Side::Source => &self.source_text,
            Side::Target => &self.target_text,
        }
    }
}

/// Per-severity penalty weights and the total-penalty cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityWeights {
    pub minor: f64,
    pub major: f64,
    pub critical: f64,
    pub cap: f64,
}

impl Default for SeverityWeights {
    fn default() -> Self {
        SeverityWeights {
            minor: 1.0,
            major: 5.0,
            critical: 25.0,
            cap: 25.0,
        }
    }
}

impl SeverityWeights {
    pub fn validate(&self) -> Result<(), MqmError> {
        if self.minor < 0.0 || self.major < 0.0 || self.critical < 0.0 {
            return Err(MqmError::InvalidWeights("weights must be non-negative".into()));
        }
        if !(self.minor <= self.major && self.major <= self.critical) {
            return Err(MqmError::InvalidWeights(
                "expected minor <= major <= critical".into(),
            ));
        }
        if self.cap <= 0.0 {
            return Err(MqmError::InvalidWeights("cap must be positive".into()));
        }
        if self.cap < self.critical {
            return Err(MqmError::InvalidWeights("cap must be at least critical".into()));
        }
        Ok(())
    }

    pub fn weight(&self, severity: Severity) -> f64 {
        match severity {
            Severity::Minor => self.minor,
            Severity::Major => self.major,
            Severity::Critical => self.critical,
        }
    }
}

/// An error reported by a model for one example: severity, MQM category, and
/// a verbatim quotation from the translation. The quotation may be empty for
/// omission-type errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedError {
    pub severity: Severity,
    pub category: String,
    #[serde(rename = "span", default)]
    pub span_text: String,
}

/// Anything carrying an MQM severity, so human spans and model predictions
/// score through the same function.
pub trait HasSeverity {
    fn severity(&self) -> Severity;
}

impl HasSeverity for ErrorSpan {
    fn severity(&self) -> Severity {
        self.severity
    }
}

impl HasSeverity for PredictedError {
    fn severity(&self) -> Severity {
        self.severity
    }
}

impl HasSeverity for Severity {
    fn severity(&self) -> Severity {
        *self
    }
}

/// Segment score from an error list: `-min(cap, sum of weights)`.
///
/// An empty list scores 0; every result lies in `[-cap, 0]`.
pub fn score_from_errors<T: HasSeverity>(errors: &[T], weights: &SeverityWeights) -> f64 {
    let sum: f64 = errors.iter().map(|e| weights.weight(e.severity())).sum();
    if sum == 0.0 {
        0.0
    } else {
        -sum.min(weights.cap)
    }
}

/// Canonical MQM category names accepted without a warning. Bare
/// subcategory names ("mistranslation") are also accepted and normalize to
/// their full form.
pub const CANONICAL_CATEGORIES: &[&str] = &[
    "accuracy/addition",
    "accuracy/mistranslation",
    "accuracy/omission",
    "accuracy/untranslated",
    "fluency/grammar",
    "fluency/spelling",
    "fluency/punctuation",
    "fluency/register",
    "fluency/inconsistency",
    "terminology",
    "style",
    "locale",
    "non-translation",
    "other",
];

/// Result of checking a category string against the canonical list.
///
/// Unknown categories are accepted with a warning rather than rejected:
/// model drift in category naming must never hard-fail an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum CategoryValidation {
    /// Member of the canonical list, in normalized full form.
    Canonical { normalized: String },
    /// Not canonical; accepted, with the nearest canonical name attached.
    Unknown { input: String, nearest: String },
}

impl CategoryValidation {
    pub fn is_canonical(&self) -> bool {
        matches!(self, CategoryValidation::Canonical { .. })
    }
}

/// Validates a category string: trim and lowercase, then match against the
/// canonical list (full names and bare subcategory names).
pub fn validate_category(category: &str) -> CategoryValidation {
    let normalized = category.trim().to_lowercase();
    for canonical in CANONICAL_CATEGORIES {
        if normalized == *canonical {
            return CategoryValidation::Canonical {
                normalized: (*canonical).to_string(),
            };
        }
        if let Some((_, bare)) = canonical.split_once('/') {
            if normalized == bare {
                return CategoryValidation::Canonical {
                    normalized: (*canonical).to_string(),
                };
            }
        }
    }
    let nearest = CANONICAL_CATEGORIES
        .iter()
        .min_by_key(|c| levenshtein(&normalized, c))
        .unwrap_or(&"other")
        .to_string();
    CategoryValidation::Unknown {
        input: category.to_string(),
        nearest,
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
