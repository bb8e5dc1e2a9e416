//! Report rendering: aligned text tables, CSV, and line-delimited records
//! over report rows, metric pivots across the batch-size grid, and the
//! relative-degradation series.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::metaeval::{DegradationEntry, ReportRow};

fn compression_label(compressed: bool) -> &'static str {
    if compressed {
        "compressed"
    } else {
        "plain"
    }
}

fn format_r(value: Option<f64>) -> String {
    match value {
        Some(r) => format!("{r:.3}"),
        None => "-".into(),
    }
}

/// One row per line with aligned columns.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut lines: Vec<Vec<String>> = vec![vec![
        "model".into(),
        "compression".into(),
        "batch_size".into(),
        "pearson".into(),
        "n_scored".into(),
        "total_tokens".into(),
        "error_rate".into(),
    ]];
    for row in rows {
        lines.push(vec![
            row.model_id.clone(),
            compression_label(row.compressed).into(),
            row.batch_size.to_string(),
            format_r(row.pearson_r),
            row.n_scored.to_string(),
            row.total_tokens.to_string(),
            format!("{:.3}", row.error_rate),
        ]);
    }
    align(&lines)
}

fn align(lines: &[Vec<String>]) -> String {
    let columns = lines[0].len();
    let mut widths = vec![0usize; columns];
    for line in lines {
        for (i, cell) in line.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for line in lines {
        let mut rendered: Vec<String> = Vec::with_capacity(columns);
        for (i, cell) in line.iter().enumerate() {
            rendered.push(format!("{cell:<width$}", width = widths[i]));
        }
        out.push_str(rendered.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "model,compression,batch_size,pearson,n_scored,total_tokens,error_rate\n",
    );
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6}\n",
            csv_field(&row.model_id),
            compression_label(row.compressed),
            row.batch_size,
            row.pearson_r.map_or(String::new(), |r| format!("{r:.6}")),
            row.n_scored,
            row.total_tokens,
            row.error_rate,
        ));
    }
    out
}

pub fn render_jsonl(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// Which metric a pivot spreads over the batch-size grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PivotMetric {
    Pearson,
    TotalTokens,
    ErrorRate,
}

impl PivotMetric {
    fn cell(&self, row: &ReportRow) -> String {
        match self {
            PivotMetric::Pearson => format_r(row.pearson_r),
            PivotMetric::TotalTokens => row.total_tokens.to_string(),
            PivotMetric::ErrorRate => format!("{:.3}", row.error_rate),
        }
    }

    fn csv_cell(&self, row: &ReportRow) -> String {
        match self {
            PivotMetric::Pearson => row.pearson_r.map_or(String::new(), |r| format!("{r:.6}")),
            PivotMetric::TotalTokens => row.total_tokens.to_string(),
            PivotMetric::ErrorRate => format!("{:.6}", row.error_rate),
        }
    }
}

/// One line per (model, compression), one column per batch size.
pub fn render_pivot(rows: &[ReportRow], metric: PivotMetric) -> String {
    let (groups, batch_sizes) = pivot_axes(rows);
    let mut lines: Vec<Vec<String>> = Vec::with_capacity(groups.len() + 1);
    let mut header = vec!["model".to_string(), "compression".to_string()];
    header.extend(batch_sizes.iter().map(|bs| format!("bs{bs}")));
    lines.push(header);
    for (model, compressed) in &groups {
        let mut line = vec![model.clone(), compression_label(*compressed).to_string()];
        for batch_size in &batch_sizes {
            let cell = rows
                .iter()
                .find(|r| {
                    &r.model_id == model
                        && r.compressed == *compressed
                        && r.batch_size == *batch_size
                })
                .map_or("-".into(), |r| metric.cell(r));
            line.push(cell);
        }
        lines.push(line);
    }
    align(&lines)
}

pub fn render_pivot_csv(rows: &[ReportRow], metric: PivotMetric) -> String {
    let (groups, batch_sizes) = pivot_axes(rows);
    let mut out = String::from("model,compression");
    for bs in &batch_sizes {
        out.push_str(&format!(",bs{bs}"));
    }
    out.push('\n');
    for (model, compressed) in &groups {
        out.push_str(&csv_field(model));
        out.push(',');
        out.push_str(compression_label(*compressed));
        for batch_size in &batch_sizes {
            out.push(',');
            if let Some(row) = rows.iter().find(|r| {
                &r.model_id == model && r.compressed == *compressed && r.batch_size == *batch_size
            }) {
                out.push_str(&metric.csv_cell(row));
            }
        }
        out.push('\n');
    }
    out
}

type PivotAxes = (Vec<(String, bool)>, Vec<usize>);

fn pivot_axes(rows: &[ReportRow]) -> PivotAxes {
    let mut groups: Vec<(String, bool)> = Vec::new();
    let mut batch_sizes: BTreeSet<usize> = BTreeSet::new();
    for row in rows {
        let key = (row.model_id.clone(), row.compressed);
        if !groups.contains(&key) {
            groups.push(key);
        }
        batch_sizes.insert(row.batch_size);
    }
    groups.sort();
    (groups, batch_sizes.into_iter().collect())
}

/// Degradation series as an aligned table.
pub fn render_degradation_table(entries: &[DegradationEntry]) -> String {
    let mut lines: Vec<Vec<String>> = vec![vec![
        "model".into(),
        "compression".into(),
        "batch_size".into(),
        "ratio".into(),
    ]];
    for entry in entries {
        lines.push(vec![
            entry.model_id.clone(),
            compression_label(entry.compressed).into(),
            entry.batch_size.to_string(),
            format!("{:.3}", entry.ratio),
        ]);
    }
    align(&lines)
}

/// Degradation series as CSV, one line per (model, compression, batch size).
pub fn render_degradation_csv(entries: &[DegradationEntry]) -> String {
    let mut out = String::from("model,compression,batch_size,ratio\n");
    for entry in entries {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            csv_field(&entry.model_id),
            compression_label(entry.compressed),
            entry.batch_size,
            entry.ratio,
        ));
    }
    out
}

/// Writes the full artifact set into `dir`: the three metric pivots, the
/// flat row listing, and the degradation series. Returns the paths written.
pub fn write_report_dir(
    dir: &Path,
    rows: &[ReportRow],
    degradation: &[DegradationEntry],
) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let artifacts: Vec<(&str, String)> = vec![
        ("rows.csv", render_csv(rows)),
        ("rows.jsonl", render_jsonl(rows)),
        ("correlation.csv", render_pivot_csv(rows, PivotMetric::Pearson)),
        ("token_usage.csv", render_pivot_csv(rows, PivotMetric::TotalTokens)),
        ("error_rate.csv", render_pivot_csv(rows, PivotMetric::ErrorRate)),
        ("degradation.csv", render_degradation_csv(degradation)),
    ];
    let mut paths = Vec::with_capacity(artifacts.len());
    for (name, content) in artifacts {
        let path = dir.join(name);
        let mut file = std::fs::File::create(&path)?;
        file.write_all(content.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}
