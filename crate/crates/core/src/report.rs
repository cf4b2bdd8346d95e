//! Aggregation of experiment runs into plain-text tables with a stable
//! column order, so report diffs stay meaningful across runs.
//!
//! A run record is a block of `key=value` lines starting with `kind=...`;
//! blocks are separated by blank lines. The `report` command and the
//! acceptance suite both consume this format.

use crate::error::{Error, Result};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl RunRecord {
    pub fn new(kind: impl Into<String>) -> Self {
        RunRecord { kind: kind.into(), fields: Vec::new() }
    }

    pub fn push(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("kind={}\n", self.kind);
        for (k, v) in &self.fields {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

/// Parses one or more blank-line-separated records.
pub fn parse_records(text: &str) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for block in text.split("\n\n") {
        let lines: Vec<&str> = block.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            continue;
        }
        let mut fields = Vec::with_capacity(lines.len());
        for line in &lines {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("run record line has no '=': {line:?}"))
            })?;
            fields.push((k.trim().to_string(), v.trim().to_string()));
        }
        if fields[0].0 != "kind" {
            return Err(Error::Format(format!(
                "run record must start with kind=..., got {:?}",
                lines[0]
            )));
        }
        let kind = fields.remove(0).1;
        records.push(RunRecord { kind, fields });
    }
    Ok(records)
}

pub fn records_to_text(records: &[RunRecord]) -> String {
    records
        .iter()
        .map(RunRecord::to_text)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut widths: Vec<usize> = self.columns.iter().map(String::len).collect();
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        writeln!(f, "## {}", self.title)?;
        let line = |f: &mut fmt::Formatter<'_>, cells: &[String]| -> fmt::Result {
            let rendered: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{c:<width$}", width = widths[i]))
                .collect();
            writeln!(f, "{}", rendered.join("  ").trim_end())
        };
        line(f, &self.columns)?;
        let dashes: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        writeln!(f, "{}", dashes.join("  "))?;
        for row in &self.rows {
            line(f, row)?;
        }
        Ok(())
    }
}

/// `(kind, title, columns)` for each known table, in render order.
const LAYOUTS: &[(&str, &str, &[&str])] = &[
    ("effectiveness", "Effectiveness", &["run", "pn_mode", "clean_acc", "fid"]),
    ("model_attack", "Model-level attacks", &["attack", "param", "acc", "fid"]),
    ("image_attack", "Image-level attacks", &["attack", "param", "acc", "fid"]),
    ("ablation", "Loss ablation", &["variant", "clean_acc", "fid", "pair_distance"]),
    ("position", "PN position", &["position", "clean_acc", "acc_after_finetune"]),
];

fn rows_for(records: &[RunRecord], kind: &str, columns: &[&str]) -> Vec<Vec<String>> {
    records
        .iter()
        .filter(|r| r.kind == kind)
        .map(|r| {
            columns
                .iter()
                .map(|c| r.get(c).unwrap_or("-").to_string())
                .collect()
        })
        .collect()
}

/// Renders all records into their tables. Known kinds use pinned layouts;
/// unknown kinds become a generic table keyed by the first record's fields.
pub fn render_tables(records: &[RunRecord]) -> String {
    let mut out = String::new();
    for (kind, title, columns) in LAYOUTS {
        let rows = rows_for(records, kind, columns);
        if rows.is_empty() {
            continue;
        }
        let table = Table {
            title: (*title).to_string(),
            columns: columns.iter().map(|c| (*c).to_string()).collect(),
            rows,
        };
        out.push_str(&table.to_string());
        out.push('\n');
    }
    let known: Vec<&str> = LAYOUTS.iter().map(|(k, _, _)| *k).collect();
    let mut seen_unknown: Vec<&str> = Vec::new();
    for record in records {
        if known.contains(&record.kind.as_str()) || seen_unknown.contains(&record.kind.as_str()) {
            continue;
        }
        seen_unknown.push(&record.kind);
        let columns: Vec<String> = record.fields.iter().map(|(k, _)| k.clone()).collect();
        let rows = records
            .iter()
            .filter(|r| r.kind == record.kind)
            .map(|r| {
                columns
                    .iter()
                    .map(|c| r.get(c).unwrap_or("-").to_string())
                    .collect()
            })
            .collect();
        let table = Table { title: record.kind.clone(), columns, rows };
        out.push_str(&table.to_string());
        out.push('\n');
    }
    out.trim_end().to_string() + "\n"
}
