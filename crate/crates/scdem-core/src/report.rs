//! Deterministic rendering of run results: JSON report, metric CSVs and
//! plot-ready accuracy-vs-task series. Byte-identical for identical runs.

use serde::{Deserialize, Serialize};

use crate::backbone::PretrainOutcome;
use crate::config::RunConfig;
use crate::engine::{DiagRow, RunReport};
use crate::metrics::MetricsReport;

/// Everything one `run` invocation produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: RunConfig,
    pub pretrain: Vec<PretrainOutcome>,
    pub report: RunReport,
}

pub fn render_json(artifact: &RunArtifact) -> String {
    let mut out = serde_json::to_string_pretty(artifact).expect("artifact serializes");
    out.push('\n');
    out
}

/// Headline metrics as one CSV row per evaluation mode.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from("mode,average_micro,average_macro,last,routing_accuracy\n");
    for m in [&report.task_il, &report.class_il] {
        let mode = match m.mode {
            crate::metrics::EvalMode::TaskIl => "task_il",
            crate::metrics::EvalMode::ClassIl => "class_il",
        };
        let routing = m
            .routing_accuracy
            .map(|r| r.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{mode},{},{},{},{routing}\n",
            m.average_micro, m.average_macro, m.last
        ));
    }
    out
}

/// Accuracy-vs-task curves: after each training stage, the macro average
/// over the tasks seen so far, plus the full lower-triangular matrix.
pub fn curves_csv(report: &MetricsReport) -> String {
    let mut out = String::from("after_task,macro_average,per_task_accuracies\n");
    for (i, row) in report.accuracy_matrix.iter().enumerate() {
        let macro_avg = if row.is_empty() {
            0.0
        } else {
            row.iter().sum::<f64>() / row.len() as f64
        };
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{},{},{}\n", i + 1, macro_avg, cells.join(";")));
    }
    out
}

pub fn diagnostics_csv(rows: &[DiagRow]) -> String {
    crate::engine::diagnostics_csv(rows)
}
