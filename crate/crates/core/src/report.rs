//! Render a Markdown summary from whatever artifacts a run directory holds.

use std::fmt::Write as _;
use std::path::Path;

use crate::pipeline::{artifacts, PipelineError, Workspace};

/// Convert a CSV artifact into a Markdown table; absent files render as
/// nothing so partially run pipelines still summarize cleanly.
fn csv_table(path: &Path) -> Result<Option<String>, PipelineError> {
    if !path.exists() {
        return Ok(None);
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if headers.is_empty() {
        return Ok(None);
    }
    let mut out = String::new();
    writeln!(out, "| {} |", headers.join(" | ")).unwrap();
    writeln!(out, "|{}", "---|".repeat(headers.len())).unwrap();
    for record in reader.records() {
        let record = record?;
        let cells: Vec<&str> = record.iter().collect();
        writeln!(out, "| {} |", cells.join(" | ")).unwrap();
    }
    Ok(Some(out))
}

fn json_value(path: &Path) -> Result<Option<serde_json::Value>, PipelineError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn fmt4(value: &serde_json::Value) -> String {
    value
        .as_f64()
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "?".to_owned())
}

pub fn render_summary(ws: &Workspace) -> Result<String, PipelineError> {
    let mut out = String::new();
    writeln!(out, "# Run summary\n").unwrap();
    writeln!(out, "- run directory: `{}`", ws.config.out_dir.display()).unwrap();
    writeln!(out, "- config hash: `{}`\n", ws.hash).unwrap();

    if let Some(stats) = json_value(&ws.path(artifacts::STATS))? {
        writeln!(out, "## Corpus\n").unwrap();
        let f = &stats["filtered"];
        let p = &stats["parsed"];
        writeln!(
            out,
            "- parsed: {} instances, {} conversations, {} toots",
            p["instances"], p["conversations"], p["toots"]
        )
        .unwrap();
        writeln!(
            out,
            "- after filters: {} instances, {} conversations, {} toots, {} unique authors",
            f["instances"], f["conversations"], f["toots"], f["unique_authors"]
        )
        .unwrap();
        writeln!(
            out,
            "- rejected lines: {}, dropped conversations: {}\n",
            stats["rejected_lines"], stats["dropped_conversations"]
        )
        .unwrap();
    }

    if let Some(table) = csv_table(&ws.path(artifacts::RETENTION))? {
        writeln!(out, "## Backbone retention\n").unwrap();
        writeln!(out, "{table}").unwrap();
    }

    if let Some(report) = json_value(&ws.path(artifacts::TRAIN_REPORT))? {
        writeln!(out, "## Federated training\n").unwrap();
        let eligible = report["eligible_clients"].as_array().map_or(0, |a| a.len());
        let rejected = report["rejected_clients"].as_array().map_or(0, |a| a.len());
        writeln!(out, "- clients: {eligible} eligible, {rejected} rejected").unwrap();
        let final_report = &report["final_report"];
        writeln!(
            out,
            "- pooled macro-F1: {}",
            fmt4(&final_report["macro_f1"])
        )
        .unwrap();
        writeln!(
            out,
            "- toxic precision: {}, toxic recall: {}",
            fmt4(&final_report["toxic_precision"]),
            fmt4(&final_report["toxic_recall"])
        )
        .unwrap();
        writeln!(
            out,
            "- client-averaged macro-F1: {}\n",
            fmt4(&final_report["client_averaged_macro_f1"])
        )
        .unwrap();
    }

    let mut any_grid = false;
    for slug in [
        "train-size",
        "conv-length",
        "clients-per-round",
        "toxicity-threshold",
        "ablation",
    ] {
        if let Some(table) = csv_table(&ws.path(&format!("grid_{slug}.csv")))? {
            if !any_grid {
                writeln!(out, "## Experiment grids\n").unwrap();
                any_grid = true;
            }
            writeln!(out, "### {slug}\n").unwrap();
            writeln!(out, "{table}").unwrap();
        }
    }

    if let Some(table) = csv_table(&ws.path(artifacts::LLM_REPORT_CSV))? {
        writeln!(out, "## Few-shot LLM baseline\n").unwrap();
        writeln!(out, "{table}").unwrap();
    }

    Ok(out)
}
