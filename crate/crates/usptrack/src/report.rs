//! Metric rows as an aligned table for people and TSV for scripts.

use std::fmt::Write as _;

use usptrack_core::eval::MetricRow;

pub const ROW_HEADER: &str = "dataset\tmethod\tmetric\tvalue\tstd\tcount";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |s| format!("{s:.4}"))
}

pub fn format_table(rows: &[MetricRow]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [r.dataset.clone(), r.method.clone(), r.metric.clone(), format!("{:.4}", r.value), opt(r.std), r.count.to_string()]
        })
        .collect();
    let head = ["dataset", "method", "metric", "value", "std", "count"];
    let mut width: Vec<usize> = head.iter().map(|h| h.len()).collect();
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let parts: Vec<String> = cols.iter().zip(&width).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&head.map(String::from));
    for c in &cells {
        line(c);
    }
    out
}

pub fn format_tsv(rows: &[MetricRow]) -> String {
    let mut out = format!("{ROW_HEADER}\n");
    for r in rows {
        let std = r.std.map_or_else(|| "NaN".into(), |s| format!("{s:?}"));
        let _ = writeln!(out, "{}\t{}\t{}\t{:?}\t{}\t{}", r.dataset, r.method, r.metric, r.value, std, r.count);
    }
    out
}
