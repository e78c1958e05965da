//! Prediction paths: task-aware (the task id selects the expert) and
//! task-free (experts compete on a confidence score built from prediction
//! entropy and divergence from the expert-average distribution).

use serde::{Deserialize, Serialize};

use crate::backbone::combined_features;
use crate::engine::TrainState;
use crate::error::{Result, ScdemError};
use crate::expert::argmax;
use crate::kernel::{self, PROB_FLOOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    /// Weight of the divergence term in the confidence score.
    pub gamma: f64,
    /// Softmax temperature applied to expert logits.
    pub temperature: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            gamma: 1.0,
            temperature: 1.0,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(ScdemError::Config(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if !(self.temperature > 0.0) {
            return Err(ScdemError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Predicts with the expert owning `task_id` (1-based).
pub fn task_il_predict(state: &TrainState, x: &Tensor, task_id: usize) -> Result<Vec<usize>> {
    if task_id == 0 || task_id > state.experts.len() {
        return Err(ScdemError::Index {
            op: "task_il_predict",
            index: task_id,
            bound: state.experts.len() + 1,
        });
    }
    let bundle = combined_features(&state.backbones, x)?;
    state.experts[task_id - 1].predict(&bundle.combined)
}

/// Tempered probability rows for every expert on precomputed features.
fn expert_distributions(state: &TrainState, zf: &Tensor, cfg: &RoutingConfig) -> Result<Vec<Tensor>> {
    state
        .experts
        .iter()
        .map(|e| {
            let logits = e.logits(zf)?;
            let scaled: Vec<f64> = logits.values().iter().map(|v| v / cfg.temperature).collect();
            let probs = kernel::softmax_rows(&scaled, logits.rows(), logits.cols());
            Tensor::new(logits.shape().to_vec(), probs)
        })
        .collect()
}

/// Confidence of expert `i` on one sample row: −entropy + γ·KL of the
/// expert's distribution against the expert-average restricted to its own
/// class set.
fn score_row(distributions: &[Tensor], row: usize, i: usize, state: &TrainState, gamma: f64) -> f64 {
    let n_experts = distributions.len();
    let union_dim = state
        .experts
        .iter()
        .flat_map(|e| e.class_set.iter().copied())
        .max()
        .map_or(0, |m| m + 1);

    // Mean of the expert distributions embedded in the union label space.
    // Each embedding is floored and renormalized so structural zeros cannot
    // produce infinite divergences.
    let mut mean = vec![0.0; union_dim];
    for (e, dist) in state.experts.iter().zip(distributions) {
        let p = dist.row(row);
        let z: f64 = 1.0 + (union_dim - e.class_set.len()) as f64 * PROB_FLOOR;
        for g in 0..union_dim {
            let v = match e.class_set.iter().position(|&c| c == g) {
                Some(local) => p[local].max(PROB_FLOOR),
                None => PROB_FLOOR,
            };
            mean[g] += v / z / n_experts as f64;
        }
    }

    let expert = &state.experts[i];
    let p = distributions[i].row(row);
    let mut restricted: Vec<f64> = expert
        .class_set
        .iter()
        .map(|&c| mean[c].max(PROB_FLOOR))
        .collect();
    let z: f64 = restricted.iter().sum();
    for r in restricted.iter_mut() {
        *r /= z;
    }
    -kernel::entropy_row(p) + gamma * kernel::kl_row(p, &restricted)
}

/// Confidence score of expert `i` (1-based) on a single input row.
pub fn expert_confidence(state: &TrainState, x: &Tensor, i: usize, cfg: &RoutingConfig) -> Result<f64> {
    cfg.validate()?;
    if i == 0 || i > state.experts.len() {
        return Err(ScdemError::Index {
            op: "expert_confidence",
            index: i,
            bound: state.experts.len() + 1,
        });
    }
    let bundle = combined_features(&state.backbones, x)?;
    let dists = expert_distributions(state, &bundle.combined, cfg)?;
    Ok(score_row(&dists, 0, i - 1, state, cfg.gamma))
}

/// Task-free prediction: routes each row to the highest-scoring expert
/// (lowest index wins ties) and returns that expert's global prediction.
pub fn class_il_predict(state: &TrainState, x: &Tensor, cfg: &RoutingConfig) -> Result<Vec<usize>> {
    Ok(class_il_predict_with_routes(state, x, cfg)?
        .into_iter()
        .map(|(label, _)| label)
        .collect())
}

/// Task-free prediction with the selected expert index (0-based) per row.
pub fn class_il_predict_with_routes(
    state: &TrainState,
    x: &Tensor,
    cfg: &RoutingConfig,
) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    if state.experts.is_empty() {
        return Err(ScdemError::Contract("no experts trained yet".into()));
    }
    let bundle = combined_features(&state.backbones, x)?;
    let zf = &bundle.combined;
    let dists = expert_distributions(state, zf, cfg)?;
    let rows = zf.rows();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let scores: Vec<f64> = (0..state.experts.len())
            .map(|i| score_row(&dists, r, i, state, cfg.gamma))
            .collect();
        let chosen = argmax(&scores);
        let local = argmax(dists[chosen].row(r));
        out.push((state.experts[chosen].global_class(local), chosen));
    }
    Ok(out)
}
