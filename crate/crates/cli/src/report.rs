//! Tabular rendering of the JSON reports written by precondition, quantize and prune.

use std::fs;

use serde_json::Value;

use crate::cli::ReportArgs;
use crate::error::{CliError, Result};
use crate::manifest::{FileKind, Recorder};

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn table(header: &[&str], items: &[Value], fields: &[&str]) -> Table {
    Table {
        header: header.iter().map(|s| s.to_string()).collect(),
        rows: items
            .iter()
            .map(|it| fields.iter().map(|f| cell(&it[*f])).collect())
            .collect(),
    }
}

fn array<'a>(v: &'a Value, key: &str) -> &'a [Value] {
    v[key].as_array().map(Vec::as_slice).unwrap_or(&[])
}

/// One table per report kind: equalization pairs, quantization sites or pruned layers.
pub fn tabulate(report: &Value) -> Result<Table> {
    let kind = report["kind"].as_str().unwrap_or("");
    match kind {
        "precondition" | "quantize" => {
            if kind == "quantize" {
                return Ok(table(
                    &["block", "site", "l", "h", "bits", "loss"],
                    array(report, "sites"),
                    &["block", "kind", "l", "h", "bits", "loss"],
                ));
            }
            let eq = &report["equalization"];
            Ok(table(
                &["prev", "next", "max_relative_gap"],
                array(eq, "pairs"),
                &["prev", "next", "max_relative_gap"],
            ))
        }
        "prune" => {
            if report["method"] == "str" {
                let layers = array(&report["str"], "layers");
                Ok(table(
                    &["block", "sparsity", "final_loss", "s_initial", "s_final", "millis"],
                    layers,
                    &["block", "sparsity", "final_loss", "s_initial", "s_final", "millis"],
                ))
            } else {
                Ok(table(
                    &["block", "weights", "kept"],
                    array(&report["baseline"], "layers"),
                    &["block", "weights", "kept"],
                ))
            }
        }
        other => Err(CliError::Usage(format!(
            "unknown report kind '{other}' (expected precondition, quantize or prune)"
        ))),
    }
}

pub fn run(a: &ReportArgs, rec: &mut Recorder) -> Result<()> {
    rec.input(&a.report, FileKind::Report)?;
    let text = fs::read_to_string(&a.report).map_err(|e| CliError::file(&a.report, e))?;
    let report: Value = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: a.report.clone(),
        source,
    })?;
    let t = tabulate(&report)?;
    let widths: Vec<usize> = (0..t.header.len())
        .map(|c| {
            t.rows
                .iter()
                .map(|r| r[c].len())
                .chain([t.header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    for r in std::iter::once(&t.header).chain(&t.rows) {
        say!("{}", line(r));
    }
    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&t.header)?;
        for r in &t.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| CliError::file(path, e))?;
        rec.output(path, FileKind::Table)?;
    }
    Ok(())
}
