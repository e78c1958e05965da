//! The three stability losses: prediction distillation over prior experts,
//! per-layer feature-distribution consistency via entropic transport, and
//! its attention-fused variant with a learned layer selector.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSnapshot};
use crate::error::{Result, ScdemError};
use crate::expert::Expert;
use crate::graph::{Activation, Graph, Var};
use crate::ot::{self, OTConfig};
use crate::params::{glorot_uniform, ParamSet};
use crate::seed::{self, salts};
use crate::tensor::Tensor;

const SELECTOR_HIDDEN: usize = 16;

/// Learnable per-backbone layer scorer; re-created fresh for each task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selector {
    pub backbone_id: usize,
    pub task_id: usize,
    feature_dim: usize,
    pub params: ParamSet,
}

impl Selector {
    pub fn new(backbone_id: usize, task_id: usize, feature_dim: usize, init_seed: u64) -> Result<Self> {
        let mut rng = seed::rng(
            init_seed,
            salts::SELECTOR_INIT ^ ((task_id as u64) << 8) ^ backbone_id as u64,
        );
        let mut params = ParamSet::new();
        let tag = format!("sel.t{task_id}.bb{backbone_id}");
        params.insert(
            format!("{tag}.l1.w"),
            glorot_uniform(&mut rng, feature_dim, SELECTOR_HIDDEN),
            true,
        )?;
        params.insert(format!("{tag}.l1.b"), Tensor::zeros(vec![SELECTOR_HIDDEN]), true)?;
        params.insert(
            format!("{tag}.l2.w"),
            glorot_uniform(&mut rng, SELECTOR_HIDDEN, 1),
            true,
        )?;
        params.insert(format!("{tag}.l2.b"), Tensor::zeros(vec![1]), true)?;
        Ok(Selector {
            backbone_id,
            task_id,
            feature_dim,
            params,
        })
    }

    /// Scalar layer logit: batch mean of the two-layer scorer output.
    fn logit_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let w1 = g.param(&self.params, 0);
        let b1 = g.param(&self.params, 1);
        let w2 = g.param(&self.params, 2);
        let b2 = g.param(&self.params, 3);
        let h = g.affine(z, w1, b1)?;
        let h = g.activation(h, Activation::Gelu);
        let s = g.affine(h, w2, b2)?;
        Ok(g.mean_all(s))
    }

    /// Softmax attention over the L layer taps: one weight per layer.
    pub fn attention_graph(&self, g: &mut Graph, layer_feats: &[Var]) -> Result<Var> {
        if layer_feats.is_empty() {
            return Err(ScdemError::Config("attention over zero layers".into()));
        }
        let mut logits = Vec::with_capacity(layer_feats.len());
        for &z in layer_feats {
            logits.push(self.logit_graph(g, z)?);
        }
        let stacked = g.stack_scalars(&logits)?;
        g.softmax(stacked)
    }
}

/// Attention weights as plain values: softmax over per-layer scores.
pub fn attention_weights(sel: &Selector, layer_feats: &[Tensor]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = layer_feats.iter().map(|t| g.input(t)).collect();
    let alpha = sel.attention_graph(&mut g, &vars)?;
    Ok(g.values(alpha).to_vec())
}

/// Σ_k α[k]·layer_k, rowwise.
pub fn fused_features(alpha: &[f64], layer_feats: &[Tensor]) -> Result<Tensor> {
    if alpha.len() != layer_feats.len() {
        return Err(ScdemError::dimension(
            "fused_features",
            format!("{} weights", layer_feats.len()),
            format!("{}", alpha.len()),
        ));
    }
    let mut g = Graph::new();
    let coeffs = g.leaf(alpha.to_vec(), vec![alpha.len()], false);
    let vars: Vec<Var> = layer_feats.iter().map(|t| g.input(t)).collect();
    let fused = g.weighted_sum(coeffs, &vars)?;
    Tensor::new(g.shape(fused).to_vec(), g.values(fused).to_vec())
}

/// Distillation over prior experts: mean-over-batch KL between each frozen
/// expert's predictions on live features and on snapshot features. Empty
/// expert list (first task) contributes zero.
pub fn com_loss_graph(
    g: &mut Graph,
    prior_experts: &[Expert],
    zf_live: Var,
    zf_frozen: Var,
) -> Result<Var> {
    let mut total = g.leaf(vec![0.0], vec![], false);
    for expert in prior_experts {
        let live_logits = expert.logits_graph(g, zf_live)?;
        let frozen_logits = expert.logits_graph(g, zf_frozen)?;
        let p = g.softmax(live_logits)?;
        let q = g.softmax(frozen_logits)?;
        let kl = g.kl_divergence(p, q)?;
        total = g.add(total, kl)?;
    }
    Ok(total)
}

/// Value-only COM loss.
pub fn com_loss(prior_experts: &[Expert], zf_live: &Tensor, zf_frozen: &Tensor) -> Result<f64> {
    if zf_live.shape() != zf_frozen.shape() {
        return Err(ScdemError::dimension(
            "com_loss",
            format!("{:?}", zf_live.shape()),
            format!("{:?}", zf_frozen.shape()),
        ));
    }
    let mut g = Graph::new();
    let live = g.input(zf_live);
    let frozen = g.input(zf_frozen);
    let v = com_loss_graph(&mut g, prior_experts, live, frozen)?;
    Ok(g.scalar_value(v))
}

/// Tracks transport-solver health across the many calls in one loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtHealth {
    pub calls: usize,
    pub nonconverged: usize,
}

impl OtHealth {
    fn absorb(&mut self, diag: ot::SinkhornDiag) {
        self.calls += 1;
        if !diag.converged {
            self.nonconverged += 1;
        }
    }
}

/// Per-layer feature-consistency loss: Σ_j Σ_k W(live taps, snapshot taps).
pub fn fdc_loss_graph(
    g: &mut Graph,
    live_taps: &[Vec<Var>],
    snap_taps: &[Vec<Var>],
    cfg: &OTConfig,
    health: &mut OtHealth,
) -> Result<Var> {
    if live_taps.len() != snap_taps.len() {
        return Err(ScdemError::dimension(
            "fdc_loss",
            format!("{} snapshot tap sets", live_taps.len()),
            format!("{}", snap_taps.len()),
        ));
    }
    let mut total = g.leaf(vec![0.0], vec![], false);
    for (live, snap) in live_taps.iter().zip(snap_taps) {
        for (&zl, &zs) in live.iter().zip(snap) {
            let (term, diag) = ot::sinkhorn_node(g, zl, zs, cfg)?;
            health.absorb(diag);
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

/// Value-only FDC loss over full backbones and snapshots.
pub fn fdc_loss(
    backbones: &[Backbone],
    snapshots: &[BackboneSnapshot],
    x_batch: &Tensor,
    cfg: &OTConfig,
) -> Result<(f64, OtHealth)> {
    let mut g = Graph::new();
    let x = g.input(x_batch);
    let live_taps = taps_for(&mut g, backbones, x)?;
    let snap_taps = snap_taps_for(&mut g, snapshots, x)?;
    let mut health = OtHealth::default();
    let v = fdc_loss_graph(&mut g, &live_taps, &snap_taps, cfg, &mut health)?;
    Ok((g.scalar_value(v), health))
}

/// Attention-fused consistency loss. For each backbone, live attention is
/// computed on live taps and snapshot attention on snapshot taps, both
/// through the same live selector, then the fused representations are
/// aligned by entropic transport.
pub fn fused_loss_graph(
    g: &mut Graph,
    selectors: &[Selector],
    live_taps: &[Vec<Var>],
    snap_taps: &[Vec<Var>],
    cfg: &OTConfig,
    health: &mut OtHealth,
) -> Result<Var> {
    if selectors.len() != live_taps.len() || live_taps.len() != snap_taps.len() {
        return Err(ScdemError::dimension(
            "fused_loss",
            "one selector and one snapshot tap set per backbone",
            format!(
                "{} selectors, {} live, {} snapshot",
                selectors.len(),
                live_taps.len(),
                snap_taps.len()
            ),
        ));
    }
    let mut total = g.leaf(vec![0.0], vec![], false);
    for ((sel, live), snap) in selectors.iter().zip(live_taps).zip(snap_taps) {
        let alpha_live = sel.attention_graph(g, live)?;
        let alpha_snap = sel.attention_graph(g, snap)?;
        let fused_live = g.weighted_sum(alpha_live, live)?;
        let fused_snap = g.weighted_sum(alpha_snap, snap)?;
        let (term, diag) = ot::sinkhorn_node(g, fused_live, fused_snap, cfg)?;
        health.absorb(diag);
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Value-only fused loss over full backbones, snapshots and selectors.
pub fn fused_loss(
    backbones: &[Backbone],
    snapshots: &[BackboneSnapshot],
    selectors: &[Selector],
    x_batch: &Tensor,
    cfg: &OTConfig,
) -> Result<(f64, OtHealth)> {
    let mut g = Graph::new();
    let x = g.input(x_batch);
    let live_taps = taps_for(&mut g, backbones, x)?;
    let snap_taps = snap_taps_for(&mut g, snapshots, x)?;
    let mut health = OtHealth::default();
    let v = fused_loss_graph(&mut g, selectors, &live_taps, &snap_taps, cfg, &mut health)?;
    Ok((g.scalar_value(v), health))
}

pub(crate) fn taps_for(g: &mut Graph, backbones: &[Backbone], x: Var) -> Result<Vec<Vec<Var>>> {
    backbones.iter().map(|bb| bb.tail_taps_graph(g, x)).collect()
}

pub(crate) fn snap_taps_for(
    g: &mut Graph,
    snapshots: &[BackboneSnapshot],
    x: Var,
) -> Result<Vec<Vec<Var>>> {
    snapshots.iter().map(|s| s.tail_taps_graph(g, x)).collect()
}
