//! Per-task expert modules: an adapter that maps the concatenated backbone
//! features to a task-specific representation, and a linear classifier over
//! the task's own classes.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdemError};
use crate::graph::{Activation, Graph, Var};
use crate::params::{glorot_uniform, ParamSet};
use crate::seed::{self, salts};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Expert {
    /// 1-based task index.
    pub task_id: usize,
    /// Global class indices owned by this task, in ascending order.
    pub class_set: Vec<usize>,
    pub frozen: bool,
    input_dim: usize,
    adapter_dim: usize,
    adapter_activation: Activation,
    pub params: ParamSet,
}

impl Expert {
    pub fn new(
        task_id: usize,
        input_dim: usize,
        adapter_dim: usize,
        adapter_activation: Activation,
        class_set: Vec<usize>,
        init_seed: u64,
    ) -> Result<Self> {
        if class_set.is_empty() {
            return Err(ScdemError::Config("expert needs a nonempty class set".into()));
        }
        if input_dim == 0 || adapter_dim == 0 {
            return Err(ScdemError::Config("expert dims must be positive".into()));
        }
        let mut rng = seed::rng(init_seed, salts::EXPERT_INIT ^ task_id as u64);
        let mut params = ParamSet::new();
        params.insert(
            format!("ex{task_id}.adapter.w"),
            glorot_uniform(&mut rng, input_dim, adapter_dim),
            true,
        )?;
        params.insert(
            format!("ex{task_id}.adapter.b"),
            Tensor::zeros(vec![adapter_dim]),
            true,
        )?;
        params.insert(
            format!("ex{task_id}.classifier.w"),
            glorot_uniform(&mut rng, adapter_dim, class_set.len()),
            true,
        )?;
        params.insert(
            format!("ex{task_id}.classifier.b"),
            Tensor::zeros(vec![class_set.len()]),
            true,
        )?;
        Ok(Expert {
            task_id,
            class_set,
            frozen: false,
            input_dim,
            adapter_dim,
            adapter_activation,
            params,
        })
    }

    /// Builds an expert with explicit weights, for fixtures and tests.
    pub fn from_weights(
        task_id: usize,
        adapter_activation: Activation,
        adapter_w: Tensor,
        adapter_b: Tensor,
        classifier_w: Tensor,
        classifier_b: Tensor,
        class_set: Vec<usize>,
    ) -> Result<Self> {
        let input_dim = adapter_w.shape()[0];
        let adapter_dim = adapter_w.shape()[1];
        if classifier_w.shape() != [adapter_dim, class_set.len()] {
            return Err(ScdemError::dimension(
                "expert::from_weights",
                format!("classifier [{adapter_dim}×{}]", class_set.len()),
                format!("{:?}", classifier_w.shape()),
            ));
        }
        let mut params = ParamSet::new();
        params.insert(format!("ex{task_id}.adapter.w"), adapter_w, true)?;
        params.insert(format!("ex{task_id}.adapter.b"), adapter_b, true)?;
        params.insert(format!("ex{task_id}.classifier.w"), classifier_w, true)?;
        params.insert(format!("ex{task_id}.classifier.b"), classifier_b, true)?;
        Ok(Expert {
            task_id,
            class_set,
            frozen: false,
            input_dim,
            adapter_dim,
            adapter_activation,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn adapter_dim(&self) -> usize {
        self.adapter_dim
    }

    pub fn n_classes(&self) -> usize {
        self.class_set.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    /// Task-specific representation z̄ = activation(zf·W + b).
    pub fn adapter_graph(&self, g: &mut Graph, zf: Var) -> Result<Var> {
        let w = g.param(&self.params, 0);
        let b = g.param(&self.params, 1);
        let pre = g.affine(zf, w, b)?;
        Ok(g.activation(pre, self.adapter_activation))
    }

    /// Classifier logits over the local class set.
    pub fn classify_graph(&self, g: &mut Graph, zbar: Var) -> Result<Var> {
        let w = g.param(&self.params, 2);
        let b = g.param(&self.params, 3);
        g.affine(zbar, w, b)
    }

    /// Adapter + classifier in one pass.
    pub fn logits_graph(&self, g: &mut Graph, zf: Var) -> Result<Var> {
        let zbar = self.adapter_graph(g, zf)?;
        self.classify_graph(g, zbar)
    }

    pub fn adapter_forward(&self, zf: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.input(zf);
        let out = self.adapter_graph(&mut g, v)?;
        Tensor::new(g.shape(out).to_vec(), g.values(out).to_vec())
    }

    pub fn classify(&self, zbar: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.input(zbar);
        let out = self.classify_graph(&mut g, v)?;
        Tensor::new(g.shape(out).to_vec(), g.values(out).to_vec())
    }

    pub fn logits(&self, zf: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.input(zf);
        let out = self.logits_graph(&mut g, v)?;
        Tensor::new(g.shape(out).to_vec(), g.values(out).to_vec())
    }

    /// Global class prediction per row; logit ties break to the lowest
    /// local index.
    pub fn predict(&self, zf: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(zf)?;
        Ok((0..logits.rows())
            .map(|r| self.class_set[argmax(logits.row(r))])
            .collect())
    }

    /// Maps a local class index to the global label space.
    pub fn global_class(&self, local: usize) -> usize {
        self.class_set[local]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.params.freeze_all();
    }

    pub fn bit_hash(&self) -> u64 {
        self.params.bit_hash()
    }
}

/// Index of the maximum entry; first occurrence wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Registry guards: unique task ids, disjoint class sets.
pub fn validate_registration(existing: &[Expert], candidate: &Expert) -> Result<()> {
    for e in existing {
        if e.task_id == candidate.task_id {
            return Err(ScdemError::Config(format!(
                "duplicate expert task id {}",
                candidate.task_id
            )));
        }
        if e.class_set.iter().any(|c| candidate.class_set.contains(c)) {
            return Err(ScdemError::Config(format!(
                "expert {} overlaps classes with expert {}",
                candidate.task_id, e.task_id
            )));
        }
    }
    Ok(())
}
