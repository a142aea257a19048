use std::io::Write;

use serde::Serialize;

/// One line of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub label: String,
    pub ndcg: f64,
    pub map: f64,
    pub ndcg_ci99: Option<f64>,
    pub map_ci99: Option<f64>,
    pub queries: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// CSV with `label,ndcg@10,ndcg@10_ci99,map@100,map@100_ci99,queries`, values to four decimals.
pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricRow], ndcg_k: usize, map_k: usize) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "label".to_string(),
        format!("ndcg@{ndcg_k}"),
        format!("ndcg@{ndcg_k}_ci99"),
        format!("map@{map_k}"),
        format!("map@{map_k}_ci99"),
        "queries".to_string(),
    ])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            format!("{:.4}", r.ndcg),
            fmt_opt(r.ndcg_ci99),
            format!("{:.4}", r.map),
            fmt_opt(r.map_ci99),
            r.queries.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width table for terminal output.
pub fn format_table(rows: &[MetricRow], ndcg_k: usize, map_k: usize) -> String {
    let cell = |mean: f64, ci: Option<f64>| match ci {
        Some(ci) => format!("{mean:.4}±{ci:.4}"),
        None => format!("{mean:.4}"),
    };
    let width = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>15}  {:>15}  {:>7}\n",
        "run",
        format!("nDCG@{ndcg_k}"),
        format!("MAP@{map_k}"),
        "queries"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>15}  {:>15}  {:>7}\n",
            r.label,
            cell(r.ndcg, r.ndcg_ci99),
            cell(r.map, r.map_ci99),
            r.queries
        ));
    }
    out
}
