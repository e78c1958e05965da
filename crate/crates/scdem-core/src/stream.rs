//! Task streams: ordered labelled task datasets with disjoint class sets,
//! built class-incrementally within one domain or across several.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitDataset};
use crate::error::{Result, ScdemError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ClassIncremental { steps: usize },
    MultiDomain { domains: Vec<String> },
}

/// One task: its train/test slices and the global classes it owns.
#[derive(Debug, Clone)]
pub struct TaskSlice {
    pub train: Dataset,
    pub test: Dataset,
    pub class_set: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskSlice>,
    pub provenance: Provenance,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Splits one dataset into `n_steps` tasks over contiguous ascending class
/// blocks. The class count must divide evenly.
pub fn build_class_incremental_stream(data: &SplitDataset, n_steps: usize) -> Result<TaskStream> {
    let tasks = class_incremental_tasks(data, n_steps)?;
    Ok(TaskStream {
        tasks,
        provenance: Provenance::ClassIncremental { steps: n_steps },
    })
}

fn class_incremental_tasks(data: &SplitDataset, n_steps: usize) -> Result<Vec<TaskSlice>> {
    if n_steps == 0 {
        return Err(ScdemError::Config("n_steps must be ≥ 1".into()));
    }
    let n_classes = data.n_classes();
    if n_classes == 0 {
        return Err(ScdemError::Config("dataset has no classes".into()));
    }
    if n_classes % n_steps != 0 {
        return Err(ScdemError::Config(format!(
            "{n_classes} classes are not divisible into {n_steps} steps"
        )));
    }
    let per_task = n_classes / n_steps;
    let mut tasks = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let class_set: Vec<usize> = (step * per_task..(step + 1) * per_task).collect();
        tasks.push(TaskSlice {
            train: data.train.filter_classes(&class_set),
            test: data.test.filter_classes(&class_set),
            class_set,
        });
    }
    Ok(tasks)
}

/// Concatenates per-domain class-incremental streams in the given order,
/// offsetting labels so the global class ranges are disjoint.
pub fn build_multi_domain_stream(
    domains: &[(String, SplitDataset)],
    steps_per_domain: &[usize],
) -> Result<TaskStream> {
    if domains.is_empty() {
        return Err(ScdemError::Config("no domains given".into()));
    }
    if domains.len() != steps_per_domain.len() {
        return Err(ScdemError::Config(format!(
            "{} domains but {} step counts",
            domains.len(),
            steps_per_domain.len()
        )));
    }
    let mut tasks = Vec::new();
    let mut offset = 0;
    for ((_, data), &steps) in domains.iter().zip(steps_per_domain) {
        for task in class_incremental_tasks(data, steps)? {
            tasks.push(TaskSlice {
                train: task.train.offset_labels(offset),
                test: task.test.offset_labels(offset),
                class_set: task.class_set.iter().map(|&c| c + offset).collect(),
            });
        }
        offset += data.n_classes();
    }
    Ok(TaskStream {
        tasks,
        provenance: Provenance::MultiDomain {
            domains: domains.iter().map(|(name, _)| name.clone()).collect(),
        },
    })
}
