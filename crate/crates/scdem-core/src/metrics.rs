//! Accuracy bookkeeping: the per-task accuracy matrix gathered after each
//! training stage, and the Average / Last / forgetting summaries.

use serde::{Deserialize, Serialize};

use crate::engine::TrainState;
use crate::error::Result;
use crate::routing::{class_il_predict_with_routes, task_il_predict, RoutingConfig};
use crate::stream::TaskStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TaskIl,
    ClassIl,
}

/// Accuracy counts for one (evaluation point, test task) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEval {
    pub correct: usize,
    pub total: usize,
    /// Samples whose selected expert owns the true label (class-IL only;
    /// equals `total` in task-IL mode where the expert is given).
    pub routing_correct: usize,
}

impl TaskEval {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Accuracies over the first `upto` tasks of the stream for the current state.
pub fn evaluate_row(
    state: &TrainState,
    stream: &TaskStream,
    mode: EvalMode,
    upto: usize,
    routing: &RoutingConfig,
) -> Result<Vec<TaskEval>> {
    let mut row = Vec::with_capacity(upto);
    for (task_idx, task) in stream.tasks.iter().take(upto).enumerate() {
        let x = task.test.inputs();
        let labels = task.test.labels();
        let mut correct = 0;
        let mut routing_correct = 0;
        match mode {
            EvalMode::TaskIl => {
                let preds = task_il_predict(state, x, task_idx + 1)?;
                for (p, &y) in preds.iter().zip(labels) {
                    if *p == y {
                        correct += 1;
                    }
                }
                routing_correct = labels.len();
            }
            EvalMode::ClassIl => {
                let preds = class_il_predict_with_routes(state, x, routing)?;
                for ((p, route), &y) in preds.iter().zip(labels) {
                    if *p == y {
                        correct += 1;
                    }
                    if *route == task_idx {
                        routing_correct += 1;
                    }
                }
            }
        }
        row.push(TaskEval {
            correct,
            total: labels.len(),
            routing_correct,
        });
    }
    Ok(row)
}

/// The accuracy matrix and its summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    /// Row i: accuracies on test tasks 1..=i+1 after training task i+1.
    pub accuracy_matrix: Vec<Vec<f64>>,
    /// Pooled-sample accuracy over all test sets after the final task.
    pub average_micro: f64,
    /// Unweighted mean of final per-task accuracies.
    pub average_macro: f64,
    /// Accuracy on the final task after the final task.
    pub last: f64,
    /// Per-task drop from peak accuracy to final accuracy.
    pub forgetting: Vec<f64>,
    /// Fraction of test samples routed to the owning expert (class-IL).
    pub routing_accuracy: Option<f64>,
}

impl MetricsReport {
    /// Builds the report from per-stage evaluation rows; the final row
    /// drives every summary metric.
    pub fn assemble(mode: EvalMode, rows: Vec<Vec<TaskEval>>) -> MetricsReport {
        let accuracy_matrix: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| row.iter().map(TaskEval::accuracy).collect())
            .collect();
        let final_row = rows.last().cloned().unwrap_or_default();
        let n_tasks = final_row.len();

        let total: usize = final_row.iter().map(|e| e.total).sum();
        let correct: usize = final_row.iter().map(|e| e.correct).sum();
        let average_micro = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        let average_macro = if n_tasks == 0 {
            0.0
        } else {
            final_row.iter().map(TaskEval::accuracy).sum::<f64>() / n_tasks as f64
        };
        let last = final_row.last().map_or(0.0, TaskEval::accuracy);

        let mut forgetting = Vec::with_capacity(n_tasks);
        for j in 0..n_tasks {
            let peak = accuracy_matrix
                .iter()
                .filter_map(|row| row.get(j).copied())
                .fold(0.0_f64, f64::max);
            forgetting.push(peak - accuracy_matrix.last().map_or(0.0, |row| row[j]));
        }

        let routing_accuracy = match mode {
            EvalMode::ClassIl if total > 0 => {
                let hits: usize = final_row.iter().map(|e| e.routing_correct).sum();
                Some(hits as f64 / total as f64)
            }
            _ => None,
        };

        MetricsReport {
            mode,
            accuracy_matrix,
            average_micro,
            average_macro,
            last,
            forgetting,
            routing_accuracy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(correct: usize, total: usize) -> TaskEval {
        TaskEval {
            correct,
            total,
            routing_correct: correct,
        }
    }

    #[test]
    fn equal_sizes_make_micro_equal_macro() {
        let report = MetricsReport::assemble(
            EvalMode::TaskIl,
            vec![vec![eval(100, 100)], vec![eval(100, 100), eval(50, 100)]],
        );
        assert!((report.average_micro - 0.75).abs() < 1e-12);
        assert!((report.average_macro - 0.75).abs() < 1e-12);
        assert!((report.last - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes_separate_micro_and_macro() {
        let report = MetricsReport::assemble(
            EvalMode::TaskIl,
            vec![vec![eval(100, 100)], vec![eval(100, 100), eval(150, 300)]],
        );
        assert!((report.average_micro - 0.625).abs() < 1e-12);
        assert!((report.average_macro - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_has_zero_forgetting() {
        let report = MetricsReport::assemble(
            EvalMode::TaskIl,
            vec![vec![eval(10, 10)], vec![eval(10, 10), eval(10, 10)]],
        );
        assert!(report.accuracy_matrix.iter().flatten().all(|&a| a == 1.0));
        assert!(report.forgetting.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn forgetting_measures_drop_from_peak() {
        let report = MetricsReport::assemble(
            EvalMode::TaskIl,
            vec![vec![eval(10, 10)], vec![eval(6, 10), eval(9, 10)]],
        );
        assert!((report.forgetting[0] - 0.4).abs() < 1e-12);
        assert!((report.forgetting[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn routing_accuracy_only_in_class_il() {
        let report = MetricsReport::assemble(EvalMode::TaskIl, vec![vec![eval(5, 10)]]);
        assert!(report.routing_accuracy.is_none());
        let report = MetricsReport::assemble(EvalMode::ClassIl, vec![vec![eval(5, 10)]]);
        assert_eq!(report.routing_accuracy, Some(0.5));
    }
}
