use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::controller::BudgetTrace;

/// One control interval of one node (or of the whole cluster, when rows of
/// all nodes are added up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub t_start: f64,
    pub t_end: f64,
    pub node: String,
    pub power_cap: f64,
    pub batch_cap: u32,
    pub tokens: f64,
    /// Tokens/s over the interval.
    pub throughput: f64,
    /// Mean per-GPU draw.
    pub gpu_power: f64,
    /// Mean wall power.
    pub system_power: f64,
    /// Wall energy, joules.
    pub energy: f64,
    pub utilization: f64,
    pub queue_depth: u64,
    pub active_batch: u32,
    pub target: Option<f64>,
    pub budget: Option<f64>,
    /// A budget brake forced the minimum cap this interval.
    pub braked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub tokens_per_joule: f64,
    pub qos_violation_rate: f64,
    /// Mean |system power - budget| over budget-active intervals.
    pub power_tracking_mae: Option<f64>,
    pub total_tokens: f64,
    pub total_energy: f64,
    pub intervals: usize,
    pub mean_throughput: f64,
}

/// Summarizes `rows`. A row violates QoS when its throughput is below
/// `target` (or below its own recorded target when `target` is `None`).
/// Tracking error is measured against `budget` when given.
pub fn summarize(rows: &[IntervalRow], target: Option<f64>, budget: Option<&BudgetTrace>) -> MetricsSummary {
    let total_tokens: f64 = rows.iter().map(|r| r.tokens).sum();
    let total_energy: f64 = rows.iter().map(|r| r.energy).sum();
    let span: f64 = rows.iter().map(|r| r.t_end - r.t_start).sum();
    let violations = rows
        .iter()
        .filter(|r| match target.or(r.target) {
            Some(t) => r.throughput < t,
            None => false,
        })
        .count();
    let tracking = budget.map(|trace| {
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter()
            .map(|r| (r.system_power - trace.at(r.t_start)).abs())
            .sum::<f64>()
            / rows.len() as f64
    });
    MetricsSummary {
        tokens_per_joule: if total_tokens > 0.0 { total_tokens / total_energy } else { 0.0 },
        qos_violation_rate: if rows.is_empty() { 0.0 } else { violations as f64 / rows.len() as f64 },
        power_tracking_mae: tracking,
        total_tokens,
        total_energy,
        intervals: rows.len(),
        mean_throughput: if span > 0.0 { total_tokens / span } else { 0.0 },
    }
}

/// Markdown comparison table, one row per (label, summary).
pub fn markdown_report(rows: &[(String, MetricsSummary)]) -> String {
    let base = rows.first().map(|(_, s)| s.tokens_per_joule).unwrap_or(0.0);
    let mut out = String::new();
    out.push_str("| policy | tokens/J | vs first | QoS violation rate | tracking MAE (W) | tokens | energy (J) |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for (label, s) in rows {
        let rel = if base > 0.0 { s.tokens_per_joule / base } else { 0.0 };
        let mae = s.power_tracking_mae.map_or("-".to_string(), |m| format!("{m:.1}"));
        let _ = writeln!(
            out,
            "| {label} | {:.5} | {rel:.3}x | {:.4} | {mae} | {:.0} | {:.0} |",
            s.tokens_per_joule, s.qos_violation_rate, s.total_tokens, s.total_energy
        );
    }
    out
}
