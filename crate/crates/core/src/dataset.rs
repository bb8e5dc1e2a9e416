//! Dataset ingestion, seeded single-language-pair batching, and holdout
//! splits.
//!
//! The on-disk format is UTF-8, one JSON record per line, with fields
//! `id, src_lang, tgt_lang, source, target, human_score, spans`. Unknown
//! fields are ignored with a warning; records violating invariants are
//! rejected with a diagnostic naming the line and id.
//!
//! All randomized operations run on ChaCha8 seeded from a caller-provided
//! 64-bit seed, so identical inputs and parameters reproduce identical
//! output within this codebase.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mqm::{ErrorSpan, Severity, SeverityWeights, Side, TranslationExample};

/// (source language, target language)
pub type LangPair = (String, String);

pub const MAX_BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("batch size range {0}..={1} is invalid (must be within 1..={MAX_BATCH_SIZE} and non-empty)")]
    InvalidSizeRange(usize, usize),
    #[error("holdout fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("need at least 2 examples to split, got {0}")]
    TooSmallToSplit(usize),
    #[error("batch must contain at least one example")]
    EmptyBatch,
    #[error("batch mixes language pairs: {0}-{1} and {2}-{3}")]
    MixedLangPair(String, String, String, String),
    #[error("tsv: {0}")]
    BadTsv(String),
}

/// A named collection of examples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<TranslationExample>,
}

impl Dataset {
    /// Builds a dataset, enforcing id uniqueness.
    pub fn new(name: impl Into<String>, examples: Vec<TranslationExample>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(DatasetError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples grouped by language pair, pairs in lexicographic order.
    pub fn by_lang_pair(&self) -> BTreeMap<LangPair, Vec<&TranslationExample>> {
        let mut groups: BTreeMap<LangPair, Vec<&TranslationExample>> = BTreeMap::new();
        for ex in &self.examples {
            groups
                .entry((ex.source_lang.clone(), ex.target_lang.clone()))
                .or_default()
                .push(ex);
        }
        groups
    }

    /// Language pairs present, in lexicographic order.
    pub fn lang_pairs(&self) -> Vec<LangPair> {
        self.by_lang_pair().into_keys().collect()
    }
}

/// An ordered group of same-language-pair examples evaluated in one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub batch_id: String,
    pub lang_pair: LangPair,
    pub examples: Vec<TranslationExample>,
}

impl EvalBatch {
    /// Builds a batch, enforcing non-emptiness and a single language pair.
    pub fn new(
        batch_id: impl Into<String>,
        examples: Vec<TranslationExample>,
    ) -> Result<Self, DatasetError> {
        let first = examples.first().ok_or(DatasetError::EmptyBatch)?;
        let pair = (first.source_lang.clone(), first.target_lang.clone());
        for ex in &examples {
            if ex.source_lang != pair.0 || ex.target_lang != pair.1 {
                return Err(DatasetError::MixedLangPair(
                    pair.0.clone(),
                    pair.1.clone(),
                    ex.source_lang.clone(),
                    ex.target_lang.clone(),
                ));
            }
        }
        Ok(EvalBatch {
            batch_id: batch_id.into(),
            lang_pair: pair,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// What happened on one input line during loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadIssue {
    /// Line was not a JSON record of the documented shape; line skipped.
    MalformedLine,
    /// A span failed bounds or a text field was empty; record rejected.
    InvalidRecord,
    /// Id already seen on an earlier line; this record rejected.
    DuplicateId,
    /// Record accepted; fields outside the documented set were ignored.
    UnknownField,
}

#[derive(Debug, Clone)]
pub struct LoadDiagnostic {
    pub line: usize,
    pub issue: LoadIssue,
    pub message: String,
}

/// A loaded dataset together with per-line diagnostics.
#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub diagnostics: Vec<LoadDiagnostic>,
}

impl LoadReport {
    /// Number of input records that were skipped or rejected.
    pub fn rejected_count(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| d.issue != LoadIssue::UnknownField)
            .count()
    }
}

const KNOWN_FIELDS: &[&str] = &[
    "id",
    "src_lang",
    "tgt_lang",
    "source",
    "target",
    "human_score",
    "spans",
];

/// Loads a line-delimited dataset file. Unreadable files are fatal; bad
/// lines and invariant violations become diagnostics.
pub fn load_dataset(path: &Path) -> Result<LoadReport, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());

    let mut examples = Vec::new();
    let mut diagnostics = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }

        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                diagnostics.push(LoadDiagnostic {
                    line: line_no,
                    issue: LoadIssue::MalformedLine,
                    message: format!("not valid JSON: {e}"),
                });
                continue;
            }
        };

        if let Some(obj) = value.as_object() {
            let unknown: Vec<&String> = obj
                .keys()
                .filter(|k| !KNOWN_FIELDS.contains(&k.as_str()))
                .collect();
            if !unknown.is_empty() {
                diagnostics.push(LoadDiagnostic {
                    line: line_no,
                    issue: LoadIssue::UnknownField,
                    message: format!(
                        "ignoring unknown fields: {}",
                        unknown
                            .iter()
                            .map(|s| s.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                });
            }
        }

        let example: TranslationExample = match serde_json::from_value(value) {
            Ok(ex) => ex,
            Err(e) => {
                diagnostics.push(LoadDiagnostic {
                    line: line_no,
                    issue: LoadIssue::MalformedLine,
                    message: format!("record does not match schema: {e}"),
                });
                continue;
            }
        };

        if let Err(e) = example.validate() {
            diagnostics.push(LoadDiagnostic {
                line: line_no,
                issue: LoadIssue::InvalidRecord,
                message: format!("record {} rejected: {e}", example.id),
            });
            continue;
        }

        if !seen_ids.insert(example.id.clone()) {
            diagnostics.push(LoadDiagnostic {
                line: line_no,
                issue: LoadIssue::DuplicateId,
                message: format!("duplicate id {} rejected", example.id),
            });
            continue;
        }

        examples.push(example);
    }

    Ok(LoadReport {
        dataset: Dataset { name, examples },
        diagnostics,
    })
}

/// Partitions a shuffled view of each language pair's examples into batches.
///
/// With `fixed_size` every batch has that size except possibly a final
/// shorter remainder batch per language pair (remainders are kept, never
/// dropped). Otherwise sizes are drawn uniformly from `size_range`.
/// Identical `(dataset, seed, parameters)` produce identical output.
pub fn make_batches(
    dataset: &Dataset,
    size_range: RangeInclusive<usize>,
    seed: u64,
    fixed_size: Option<usize>,
) -> Result<Vec<EvalBatch>, DatasetError> {
    if dataset.is_empty() {
        return Err(DatasetError::Empty);
    }
    let (lo, hi) = (*size_range.start(), *size_range.end());
    if lo < 1 || hi > MAX_BATCH_SIZE || lo > hi {
        return Err(DatasetError::InvalidSizeRange(lo, hi));
    }
    if let Some(n) = fixed_size {
        if !(1..=MAX_BATCH_SIZE).contains(&n) {
            return Err(DatasetError::InvalidSizeRange(n, n));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();

    for (pair, group) in dataset.by_lang_pair() {
        let mut pool: Vec<TranslationExample> = group.into_iter().cloned().collect();
        pool.shuffle(&mut rng);

        let mut start = 0usize;
        let mut index = 0usize;
        while start < pool.len() {
            let want = match fixed_size {
                Some(n) => n,
                None => rng.random_range(lo..=hi),
            };
            let end = (start + want).min(pool.len());
            let examples = pool[start..end].to_vec();
            batches.push(EvalBatch {
                batch_id: format!("{}-{}-b{:04}", pair.0, pair.1, index),
                lang_pair: pair.clone(),
                examples,
            });
            start = end;
            index += 1;
        }
    }

    Ok(batches)
}

/// Splits off a holdout of `round(fraction * N)` examples (round half away
/// from zero), selected uniformly without stratification. Both halves keep
/// the dataset's original example order.
pub fn split_holdout(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(DatasetError::TooSmallToSplit(n));
    }

    let holdout_size = (fraction * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let holdout_set: BTreeSet<usize> = indices.into_iter().take(holdout_size).collect();

    let mut train = Vec::with_capacity(n - holdout_size);
    let mut holdout = Vec::with_capacity(holdout_size);
    for (i, ex) in dataset.examples.iter().enumerate() {
        if holdout_set.contains(&i) {
            holdout.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }

    Ok((
        Dataset {
            name: format!("{}-train", dataset.name),
            examples: train,
        },
        Dataset {
            name: format!("{}-holdout", dataset.name),
            examples: holdout,
        },
    ))
}

/// Columns a WMT-MQM-style TSV export must carry, named in its header line
/// (any order): system, seg_id, src_lang, tgt_lang, source, target,
/// category, severity.
const WMT_COLUMNS: [&str; 8] = [
    "system",
    "seg_id",
    "src_lang",
    "tgt_lang",
    "source",
    "target",
    "category",
    "severity",
];

fn is_no_error(severity: &str) -> bool {
    matches!(
        severity.trim().to_lowercase().as_str(),
        "no-error" | "no_error" | "none" | "neutral"
    )
}

struct MarkedText {
    clean: String,
    span: Option<(usize, usize)>,
    note: Option<&'static str>,
}

/// Splits off the `<v>...</v>` inline error marker: the text without the
/// markers, and the marked range in characters of the cleaned text.
fn extract_marked(text: &str) -> MarkedText {
    match (text.find("<v>"), text.find("</v>")) {
        (Some(open), Some(close)) if open + 3 <= close => {
            let inner = &text[open + 3..close];
            let clean = format!("{}{}{}", &text[..open], inner, &text[close + 4..]);
            let start = text[..open].chars().count();
            let note = if text[close + 4..].contains("<v>") {
                Some("extra span markers ignored")
            } else {
                None
            };
            MarkedText {
                clean,
                span: Some((start, start + inner.chars().count())),
                note,
            }
        }
        (None, None) => MarkedText {
            clean: text.to_string(),
            span: None,
            note: None,
        },
        _ => MarkedText {
            clean: text.to_string(),
            span: None,
            note: Some("unpaired span marker left verbatim"),
        },
    }
}

#[derive(Default)]
struct WmtGroup {
    source: String,
    target: String,
    spans: Vec<ErrorSpan>,
    penalty: f64,
    rejected: Option<String>,
}

/// Converts a WMT-MQM-style tab-separated export into native examples.
///
/// One input row per annotated error; a row whose severity reads
/// no-error/no_error/none/neutral marks a clean segment. The erroneous span
/// is marked inline as `<v>...</v>` in the source or target column; rows
/// without a marker still count toward the score but contribute no span.
/// Rows sharing (system, seg_id, languages) merge into one example with id
/// `system:src-tgt:seg_id`, scored as the capped negated severity-weight
/// sum under default weights. Recoverable problems become diagnostics;
/// only an unusable header is fatal.
pub fn import_wmt_tsv(text: &str) -> Result<(Vec<TranslationExample>, Vec<String>), DatasetError> {
    let weights = SeverityWeights::default();
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, line)) if line.trim().is_empty() => continue,
            Some((_, line)) => break line.trim_end_matches('\r'),
            None => return Err(DatasetError::BadTsv("input has no header line".into())),
        }
    };
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let mut index = BTreeMap::new();
    for required in WMT_COLUMNS {
        match names.iter().position(|n| *n == required) {
            Some(at) => {
                index.insert(required, at);
            }
            None => {
                return Err(DatasetError::BadTsv(format!(
                    "header missing column '{required}'"
                )))
            }
        }
    }

    type Key = (String, String, String, String);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, WmtGroup> = BTreeMap::new();
    let mut diagnostics = Vec::new();

    for (line_idx, raw) in lines {
        let line_no = line_idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < names.len() {
            diagnostics.push(format!(
                "line {line_no}: {} fields where the header has {}; row skipped",
                fields.len(),
                names.len()
            ));
            continue;
        }
        let field = |name: &str| fields[index[name]].trim();

        let source = extract_marked(field("source"));
        let target = extract_marked(field("target"));
        for (side, marked) in [("source", &source), ("target", &target)] {
            if let Some(note) = marked.note {
                diagnostics.push(format!("line {line_no}: {side}: {note}"));
            }
        }

        let key: Key = (
            field("system").to_string(),
            field("seg_id").to_string(),
            field("src_lang").to_string(),
            field("tgt_lang").to_string(),
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
            groups.insert(
                key.clone(),
                WmtGroup {
                    source: source.clean.clone(),
                    target: target.clean.clone(),
                    ..WmtGroup::default()
                },
            );
        }
        let group = groups.get_mut(&key).expect("inserted above");
        if group.rejected.is_some() {
            continue;
        }
        if group.source != source.clean || group.target != target.clean {
            group.rejected = Some(format!(
                "rows disagree on segment text (first divergence at line {line_no})"
            ));
            continue;
        }

        let severity_raw = field("severity");
        if is_no_error(severity_raw) {
            continue;
        }
        let Some(severity) = Severity::parse_lenient(severity_raw) else {
            diagnostics.push(format!(
                "line {line_no}: unknown severity '{severity_raw}'; row skipped"
            ));
            continue;
        };
        group.penalty += weights.weight(severity);

        let (side, span) = match (source.span, target.span) {
            (Some(_), Some(span)) => {
                diagnostics.push(format!(
                    "line {line_no}: both sides marked; target span kept"
                ));
                (Side::Target, Some(span))
            }
            (None, Some(span)) => (Side::Target, Some(span)),
            (Some(span), None) => (Side::Source, Some(span)),
            (None, None) => (Side::Target, None),
        };
        if let Some((start_char, end_char)) = span {
            let mut category = field("category").to_string();
            if category.is_empty() {
                category = "other".into();
            }
            group.spans.push(ErrorSpan {
                side,
                start_char,
                end_char,
                severity,
                category,
            });
        }
    }

    let mut examples = Vec::with_capacity(order.len());
    for key in order {
        let (system, seg_id, src_lang, tgt_lang) = key.clone();
        let group = groups.remove(&key).expect("keyed by order");
        let id = format!("{system}:{src_lang}-{tgt_lang}:{seg_id}");
        if let Some(reason) = group.rejected {
            diagnostics.push(format!("segment {id} rejected: {reason}"));
            continue;
        }
        let penalty = group.penalty.min(weights.cap);
        let example = TranslationExample {
            id: id.clone(),
            source_lang: src_lang,
            target_lang: tgt_lang,
            source_text: group.source,
            target_text: group.target,
            human_score: Some(if penalty == 0.0 { 0.0 } else { -penalty }),
            spans: group.spans,
        };
        match example.validate() {
            Ok(()) => examples.push(example),
            Err(error) => diagnostics.push(format!("segment {id} rejected: {error}")),
        }
    }
    Ok((examples, diagnostics))
}
