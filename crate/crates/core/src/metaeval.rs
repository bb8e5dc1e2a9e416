//! The three run metrics — Pearson correlation of judge scores against
//! human scores, token usage, and malformed-output error rate — plus the
//! grouping that turns per-batch run records into report rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LangPair;
use crate::gateway::UsageRecord;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("pearson inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("pearson needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("pearson is undefined: {0} input has zero variance")]
    ZeroVariance(&'static str),
    #[error("run record is inconsistent: {0}")]
    BadRecord(String),
}

/// One example's outcome inside a run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub human_score: f64,
    /// Present exactly when `malformed` is false.
    pub llm_score: Option<f64>,
    pub malformed: bool,
}

/// Everything one evaluated batch contributes to the report: identity of
/// the run cell, the batch's language pair, per-example outcomes, and the
/// token usage its request consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model_id: String,
    pub compressed: bool,
    pub batch_size: usize,
    pub lang_pair: LangPair,
    pub examples: Vec<ExampleRecord>,
    pub usage: UsageRecord,
}

impl RunRecord {
    pub fn validate(&self) -> Result<(), MetricError> {
        for example in &self.examples {
            if example.llm_score.is_some() == example.malformed {
                return Err(MetricError::BadRecord(format!(
                    "example {}: llm_score must be present exactly when not malformed",
                    example.id
                )));
            }
        }
        if self.examples.is_empty() {
            return Err(MetricError::BadRecord("record has no examples".into()));
        }
        Ok(())
    }
}

/// Fraction of examples whose output was malformed.
pub fn error_rate(record: &RunRecord) -> f64 {
    let malformed = record.examples.iter().filter(|e| e.malformed).count();
    malformed as f64 / record.examples.len() as f64
}

/// Two-pass product-moment correlation. Degenerate inputs surface as
/// distinct errors rather than NaN.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;

    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(MetricError::ZeroVariance("first"));
    }
    if var_y == 0.0 {
        return Err(MetricError::ZeroVariance("second"));
    }
    // Single square root of the product keeps x == y exact at 1.0; the
    // clamp only absorbs rounding past the ends of the legal range.
    Ok((cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0))
}

/// How a report row's correlation pools examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// One correlation over all scored examples in the row.
    #[default]
    Pooled,
    /// Mean of per-language-pair correlations (pairs lacking a defined
    /// correlation are skipped).
    PerPairMean,
}

/// One row of the report: a (model, compression, batch size) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub compressed: bool,
    pub batch_size: usize,
    /// None when fewer than 2 scored examples or zero variance.
    pub pearson_r: Option<f64>,
    pub n_scored: usize,
    /// Mean over language pairs of the pair's total token usage.
    pub total_tokens: u64,
    /// Mean over language pairs of the pair's malformed fraction.
    pub error_rate: f64,
}

type GroupKey = (String, bool, usize);

/// Folds run records into one row per (model, compressed, batch size).
/// Token totals and error rates are computed per language pair and then
/// averaged across pairs; the correlation pools scored examples according
/// to `mode`. Input order never affects the result.
pub fn aggregate(records: &[RunRecord], mode: CorrelationMode) -> Vec<ReportRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&RunRecord>> = BTreeMap::new();
    for record in records {
        groups
            .entry((record.model_id.clone(), record.compressed, record.batch_size))
            .or_default()
            .push(record);
    }

    groups
        .into_iter()
        .map(|((model_id, compressed, batch_size), members)| {
            let mut by_pair: BTreeMap<&LangPair, Vec<&RunRecord>> = BTreeMap::new();
            for record in &members {
                by_pair.entry(&record.lang_pair).or_default().push(record);
            }

            let mut pair_tokens = Vec::with_capacity(by_pair.len());
            let mut pair_error_rates = Vec::with_capacity(by_pair.len());
            let mut pair_correlations = Vec::new();
            for records in by_pair.values() {
                let tokens: u64 = records.iter().map(|r| r.usage.total()).sum();
                let total: usize = records.iter().map(|r| r.examples.len()).sum();
                let malformed: usize = records
                    .iter()
                    .flat_map(|r| &r.examples)
                    .filter(|e| e.malformed)
                    .count();
                pair_tokens.push(tokens);
                pair_error_rates.push(malformed as f64 / total as f64);

                if mode == CorrelationMode::PerPairMean {
                    let (xs, ys) = scored_points(records.iter().copied());
                    if let Ok(r) = pearson(&xs, &ys) {
                        pair_correlations.push(r);
                    }
                }
            }

            let (xs, ys) = scored_points(members.iter().copied());
            let n_scored = xs.len();
            let pearson_r = match mode {
                CorrelationMode::Pooled => pearson(&xs, &ys).ok(),
                CorrelationMode::PerPairMean => {
                    if pair_correlations.is_empty() {
                        None
                    } else {
                        Some(pair_correlations.iter().sum::<f64>() / pair_correlations.len() as f64)
                    }
                }
            };

            let pairs = pair_tokens.len() as f64;
            let total_tokens =
                (pair_tokens.iter().sum::<u64>() as f64 / pairs).round() as u64;
            let error_rate = pair_error_rates.iter().sum::<f64>() / pairs;

            ReportRow {
                model_id,
                compressed,
                batch_size,
                pearson_r,
                n_scored,
                total_tokens,
                error_rate,
            }
        })
        .collect()
}

fn scored_points<'a>(records: impl Iterator<Item = &'a RunRecord>) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in records {
        for example in &record.examples {
            if let Some(llm) = example.llm_score {
                xs.push(llm);
                ys.push(example.human_score);
            }
        }
    }
    (xs, ys)
}

/// Correlation at each batch size relative to the baseline batch size,
/// per (model, compressed) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationEntry {
    pub model_id: String,
    pub compressed: bool,
    pub batch_size: usize,
    pub ratio: f64,
}

/// Ratios pearson(bs)/pearson(baseline) for every row whose group has a
/// baseline row with an available correlation; groups without one are
/// skipped with a diagnostic. The baseline's own ratio is exactly 1.0.
pub fn relative_degradation(
    rows: &[ReportRow],
    baseline_batch_size: usize,
) -> (Vec<DegradationEntry>, Vec<String>) {
    let mut baselines: BTreeMap<(String, bool), f64> = BTreeMap::new();
    for row in rows {
        if row.batch_size == baseline_batch_size {
            if let Some(r) = row.pearson_r {
                baselines.insert((row.model_id.clone(), row.compressed), r);
            }
        }
    }

    let mut entries = Vec::new();
    let mut diagnostics = Vec::new();
    let mut skipped: Vec<(String, bool)> = Vec::new();
    for row in rows {
        let key = (row.model_id.clone(), row.compressed);
        match (baselines.get(&key), row.pearson_r) {
            (Some(baseline), Some(r)) => entries.push(DegradationEntry {
                model_id: row.model_id.clone(),
                compressed: row.compressed,
                batch_size: row.batch_size,
                ratio: r / baseline,
            }),
            (None, _) => {
                if !skipped.contains(&key) {
                    diagnostics.push(format!(
                        "no baseline (batch size {baseline_batch_size}) correlation for {} / {}; group skipped",
                        key.0,
                        if key.1 { "compressed" } else { "plain" },
                    ));
                    skipped.push(key);
                }
            }
            (Some(_), None) => diagnostics.push(format!(
                "row {} / {} / bs {} has no correlation; skipped",
                row.model_id,
                if row.compressed { "compressed" } else { "plain" },
                row.batch_size
            )),
        }
    }
    (entries, diagnostics)
}
