//! Attention heatmaps as CSV matrices with token headers plus plain-text graymaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mrnn_core::attention::AttentionTrace;
use mrnn_core::config::ModelConfig;

/// Trace plus the strings needed to read it.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TraceExport<'a> {
    pub query_id: &'a str,
    pub doc_id: &'a str,
    pub query_tokens: &'a [String],
    pub doc_tokens: &'a [String],
    pub model: &'a ModelConfig,
    #[serde(flatten)]
    pub trace: &'a AttentionTrace,
}

/// Writes `rows` with a header of `corner` followed by `columns`, each row led by its label.
pub fn write_csv(path: &Path, corner: &str, columns: &[String], labels: &[String], rows: &[Vec<f64>]) -> Result<()> {
    if labels.len() != rows.len() || rows.iter().any(|r| r.len() != columns.len()) {
        bail!("{}: matrix does not match its headers", path.display());
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(std::iter::once(corner).chain(columns.iter().map(String::as_str)))?;
    for (label, row) in labels.iter().zip(rows) {
        let cells = std::iter::once(label.clone()).chain(row.iter().map(|v| v.to_string()));
        w.write_record(cells)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain (P2) graymap, one pixel per cell; weights in [0, 1] map linearly onto [0, 255].
pub fn graymap(rows: &[Vec<f64>]) -> String {
    let width = rows.first().map_or(0, Vec::len);
    let mut out = format!("P2\n{} {}\n255\n", width, rows.len());
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Writes the three weight matrices as CSV and PGM plus `trace.json`; returns the written paths.
pub fn export(dir: &Path, export: &TraceExport<'_>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let blocks: Vec<String> = (1..=export.trace.mr_weights_q.len()).map(|n| format!("G{n}")).collect();
    let q = export.query_tokens.to_vec();
    let d = export.doc_tokens.to_vec();
    let matrices: [(&str, &str, &[String], &[String], &[Vec<f64>]); 3] = [
        ("mr_weights_q", "block", &q, &blocks, &export.trace.mr_weights_q),
        ("mr_weights_d", "block", &d, &blocks, &export.trace.mr_weights_d),
        ("doc_aware", "query\\doc", &d, &q, &export.trace.doc_aware_weights),
    ];
    let mut written = Vec::new();
    for (name, corner, columns, labels, rows) in matrices {
        let csv_path = dir.join(format!("{name}.csv"));
        write_csv(&csv_path, corner, columns, labels, rows)?;
        let pgm_path = dir.join(format!("{name}.pgm"));
        fs::write(&pgm_path, graymap(rows)).with_context(|| format!("writing {}", pgm_path.display()))?;
        written.extend([csv_path, pgm_path]);
    }
    let json_path = dir.join("trace.json");
    let json = serde_json::to_string_pretty(export)?;
    fs::write(&json_path, json + "\n").with_context(|| format!("writing {}", json_path.display()))?;
    written.push(json_path);
    Ok(written)
}
