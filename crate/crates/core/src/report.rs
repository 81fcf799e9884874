//! Aggregates run reports into a comparison table.

use std::collections::BTreeMap;

use crate::train::RunReport;

/// Columns of the comparison table, in display order.
pub const COLUMNS: [(&str, usize, bool); 4] = [("R@20", 20, true), ("N@20", 20, false), ("R@10", 10, true), ("N@10", 10, false)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone)]
pub struct Row {
    pub label: String,
    pub cells: Vec<MeanStd>,
}

/// Groups reports by label and summarises each column across seeds.
pub fn summarize(reports: &[RunReport]) -> Vec<Row> {
    let mut groups: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.label.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(label, runs)| Row {
            label: label.to_string(),
            cells: COLUMNS
                .iter()
                .map(|&(_, k, recall)| {
                    let vals: Vec<f64> = runs
                        .iter()
                        .map(|r| if recall { r.test.recall(k) } else { r.test.ndcg(k) })
                        .collect();
                    MeanStd::of(&vals)
                })
                .collect(),
        })
        .collect()
}

/// Markdown table, `mean ± std` per cell, best mean per column in bold.
pub fn markdown_table(rows: &[Row]) -> String {
    let mut out = String::from("| method | seeds |");
    for (name, _, _) in COLUMNS {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(COLUMNS.len()));
    out.push('\n');
    let best: Vec<f64> = (0..COLUMNS.len())
        .map(|c| rows.iter().map(|r| r.cells[c].mean).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    for row in rows {
        let seeds = row.cells.first().map_or(0, |c| c.n);
        out.push_str(&format!("| {} | {} |", row.label, seeds));
        for (c, cell) in row.cells.iter().enumerate() {
            let text = format!("{:.4} ± {:.4}", cell.mean, cell.std);
            if cell.mean == best[c] {
                out.push_str(&format!(" **{text}** |"));
            } else {
                out.push_str(&format!(" {text} |"));
            }
        }
        out.push('\n');
    }
    out
}
