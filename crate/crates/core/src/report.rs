//! Sweep results as NLL tables with significance-aware best-cell marking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::mark_best;
use crate::sweep::{scores_by_cell, sort_values, Axis, AxisValue, ResultRecord};

pub const MISSING_CELL: &str = "—";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub corpus: String,
    /// Mean over seeds, rounded to two decimals.
    pub cells: Vec<Option<f64>>,
    pub best: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportTable {
    pub axis: Axis,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportDocument {
    pub two_sigma: f64,
    pub tables: Vec<ReportTable>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Best cell among the present ones, as an index into the full row.
fn best_present(cells: &[Option<f64>], two_sigma: f64) -> Option<usize> {
    let present: Vec<(usize, f64)> = cells.iter().enumerate().filter_map(|(i, c)| c.map(|v| (i, v))).collect();
    let values: Vec<f64> = present.iter().map(|(_, v)| *v).collect();
    mark_best(&values, two_sigma).map(|i| present[i].0)
}

/// One table per axis present in `records`: corpora as rows (sorted), axis
/// values as columns (ascending), failed runs ignored.
pub fn emit_report(records: &[ResultRecord], two_sigma: f64) -> Result<ReportDocument> {
    if !(two_sigma >= 0.0 && two_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("two_sigma must be a nonnegative number, got {two_sigma}")));
    }
    let ok: Vec<&ResultRecord> = records.iter().filter(|r| r.succeeded()).collect();
    if ok.is_empty() {
        return Err(Error::Sweep("no completed runs to report".into()));
    }
    let scores = scores_by_cell(records);
    let mut axes: BTreeMap<Axis, (Vec<AxisValue>, BTreeSet<String>)> = BTreeMap::new();
    for r in &ok {
        let entry = axes.entry(r.axis).or_default();
        entry.0.push(r.value);
        entry.1.insert(r.corpus.clone());
    }
    let tables = axes
        .into_iter()
        .map(|(axis, (mut values, corpora))| {
            sort_values(&mut values);
            let columns: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            let rows = corpora
                .into_iter()
                .map(|corpus| {
                    let cells: Vec<Option<f64>> = columns
                        .iter()
                        .map(|col| {
                            scores
                                .get(&(axis, corpus.clone(), col.clone()))
                                .map(|s| round2(s.iter().sum::<f64>() / s.len() as f64))
                        })
                        .collect();
                    let best = best_present(&cells, two_sigma);
                    ReportRow { corpus, cells, best }
                })
                .collect();
            ReportTable { axis, columns, rows }
        })
        .collect();
    Ok(ReportDocument { two_sigma, tables })
}

fn cell_text(cell: Option<f64>) -> String {
    cell.map_or_else(|| MISSING_CELL.to_string(), |v| format!("{v:.2}"))
}

impl ReportDocument {
    /// Fixed-width columns; the best cell carries a trailing `*`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (n, table) in self.tables.iter().enumerate() {
            if n > 0 {
                out.push('\n');
            }
            let _ = writeln!(
                out,
                "{} (mean test NLL per word; * = best by more than 2σ = {})",
                table.axis.title(),
                self.two_sigma
            );
            let mut grid: Vec<Vec<String>> = vec![std::iter::once("corpus".to_string()).chain(table.columns.iter().cloned()).collect()];
            for row in &table.rows {
                let mut line = vec![row.corpus.clone()];
                for (i, c) in row.cells.iter().enumerate() {
                    let mut s = cell_text(*c);
                    if row.best == Some(i) {
                        s.push('*');
                    }
                    line.push(s);
                }
                grid.push(line);
            }
            let widths: Vec<usize> = (0..grid[0].len())
                .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
                .collect();
            for line in grid {
                let cells: Vec<String> = line
                    .iter()
                    .enumerate()
                    .map(|(c, s)| {
                        let pad = widths[c] - s.chars().count();
                        if c == 0 {
                            format!("{s}{}", " ".repeat(pad))
                        } else {
                            format!("{}{s}", " ".repeat(pad))
                        }
                    })
                    .collect();
                let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            }
        }
        out
    }

    /// One `tabular` per axis; the best cell is wrapped in `\textbf`.
    pub fn to_latex(&self) -> String {
        let mut out = String::new();
        for table in &self.tables {
            let _ = writeln!(out, "\\begin{{table}}[t]");
            let _ = writeln!(out, "\\centering");
            let _ = writeln!(out, "\\begin{{tabular}}{{l{}}}", "r".repeat(table.columns.len()));
            let _ = writeln!(out, "\\hline");
            let _ = writeln!(out, "Corpus & {} \\\\", table.columns.join(" & "));
            let _ = writeln!(out, "\\hline");
            for row in &table.rows {
                let cells: Vec<String> = row
                    .cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let s = cell_text(*c);
                        if row.best == Some(i) {
                            format!("\\textbf{{{s}}}")
                        } else {
                            s
                        }
                    })
                    .collect();
                let _ = writeln!(out, "{} & {} \\\\", latex_escape(&row.corpus), cells.join(" & "));
            }
            let _ = writeln!(out, "\\hline");
            let _ = writeln!(out, "\\end{{tabular}}");
            let _ = writeln!(
                out,
                "\\caption{{Average test word NLL by {}.}}",
                table.axis.title().to_lowercase()
            );
            let _ = writeln!(out, "\\end{{table}}");
        }
        out
    }
}

fn latex_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '_' | '&' | '%' | '$' | '#' | '{' | '}' => {
                out.push('\\');
                out.push(ch);
            }
            _ => out.push(ch),
        }
    }
    out
}
