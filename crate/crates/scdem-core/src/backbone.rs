//! Multi-source feature extractors: a frozen trunk, L trainable tail
//! layers with per-layer feature taps, and immutable snapshots that serve
//! as the distillation reference for the following task.

use serde::{Deserialize, Serialize};

use crate::data::{shuffled_indices, SplitDataset};
use crate::error::{Result, ScdemError};
use crate::graph::{Activation, Graph, Var};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{glorot_uniform, ParamSet};
use crate::seed::{self, salts};
use crate::tensor::Tensor;

/// One affine + activation layer; weights live in the owning [`ParamSet`]
/// at the recorded entry indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    w: usize,
    b: usize,
}

impl LayerSpec {
    fn apply(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        let pre = g.affine(x, w, b)?;
        Ok(g.activation(pre, self.activation))
    }
}

/// Stand-in backbone architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub trunk_widths: Vec<usize>,
    /// L: number of trainable tail layers.
    pub tail_layers: usize,
    /// d_z: width of every tail layer and of the final feature.
    pub feature_dim: usize,
    pub activation: Activation,
    /// Per-tail-layer activation override; length L when set.
    pub tail_activations: Option<Vec<Activation>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // Relu interior tails with a bounded final layer: interior layers
        // keep gradients flowing so consistency losses have something to
        // restrain, while the bounded output keeps expert logits comparable
        // across tasks for entropy-based routing.
        BackboneConfig {
            input_dim: 32,
            trunk_widths: vec![192, 192],
            tail_layers: 3,
            feature_dim: 32,
            activation: Activation::Relu,
            tail_activations: Some(vec![Activation::Relu, Activation::Relu, Activation::Tanh]),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_widths.is_empty() {
            return Err(ScdemError::Config("backbone needs at least one trunk layer".into()));
        }
        if self.tail_layers == 0 {
            return Err(ScdemError::Config("backbone needs at least one tail layer".into()));
        }
        if self.input_dim == 0 || self.feature_dim == 0 {
            return Err(ScdemError::Config("backbone dims must be positive".into()));
        }
        if let Some(acts) = &self.tail_activations {
            if acts.len() != self.tail_layers {
                return Err(ScdemError::Config(format!(
                    "tail_activations needs {} entries, got {}",
                    self.tail_layers,
                    acts.len()
                )));
            }
        }
        Ok(())
    }

    fn tail_activation(&self, k: usize) -> Activation {
        self.tail_activations
            .as_ref()
            .map_or(self.activation, |acts| acts[k])
    }
}

/// Feature extractor with a frozen trunk and trainable tail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub id: usize,
    input_dim: usize,
    feature_dim: usize,
    trunk: Vec<LayerSpec>,
    tail: Vec<LayerSpec>,
    pub params: ParamSet,
}

impl Backbone {
    /// Fresh Glorot-initialized backbone. Trunk entries are non-trainable
    /// from the start; only [`pretrain_backbone`] ever updates them.
    pub fn new(id: usize, cfg: &BackboneConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(init_seed, salts::BACKBONE_INIT ^ id as u64);
        let mut params = ParamSet::new();
        let mut trunk = Vec::new();
        let mut tail = Vec::new();
        let mut prev = cfg.input_dim;
        for (k, &width) in cfg.trunk_widths.iter().enumerate() {
            let w = glorot_uniform(&mut rng, prev, width);
            let b = Tensor::zeros(vec![width]);
            let w_idx = params.len();
            params.insert(format!("bb{id}.trunk{k}.w"), w, false)?;
            let b_idx = params.len();
            params.insert(format!("bb{id}.trunk{k}.b"), b, false)?;
            trunk.push(LayerSpec {
                in_dim: prev,
                out_dim: width,
                activation: cfg.activation,
                w: w_idx,
                b: b_idx,
            });
            prev = width;
        }
        for k in 0..cfg.tail_layers {
            let out = cfg.feature_dim;
            let w = glorot_uniform(&mut rng, prev, out);
            let b = Tensor::zeros(vec![out]);
            let w_idx = params.len();
            params.insert(format!("bb{id}.tail{k}.w"), w, true)?;
            let b_idx = params.len();
            params.insert(format!("bb{id}.tail{k}.b"), b, true)?;
            tail.push(LayerSpec {
                in_dim: prev,
                out_dim: out,
                activation: cfg.tail_activation(k),
                w: w_idx,
                b: b_idx,
            });
            prev = out;
        }
        Ok(Backbone {
            id,
            input_dim: cfg.input_dim,
            feature_dim: cfg.feature_dim,
            trunk,
            tail,
            params,
        })
    }

    /// Assembles a backbone from explicit layers and parameters; mainly for
    /// small hand-built fixtures.
    pub fn from_parts(
        id: usize,
        input_dim: usize,
        feature_dim: usize,
        trunk: Vec<(usize, usize, Activation)>,
        tail: Vec<(usize, usize, Activation)>,
        weights: Vec<(Tensor, Tensor)>,
    ) -> Result<Self> {
        if weights.len() != trunk.len() + tail.len() {
            return Err(ScdemError::Config("one (w, b) pair per layer required".into()));
        }
        let mut params = ParamSet::new();
        let mut specs = Vec::new();
        for (k, ((in_dim, out_dim, activation), (w, b))) in trunk
            .iter()
            .chain(tail.iter())
            .zip(weights.into_iter())
            .enumerate()
        {
            let trainable = k >= trunk.len();
            let w_idx = params.len();
            params.insert(format!("bb{id}.layer{k}.w"), w, trainable)?;
            let b_idx = params.len();
            params.insert(format!("bb{id}.layer{k}.b"), b, trainable)?;
            specs.push(LayerSpec {
                in_dim: *in_dim,
                out_dim: *out_dim,
                activation: *activation,
                w: w_idx,
                b: b_idx,
            });
        }
        let tail_specs = specs.split_off(trunk.len());
        Ok(Backbone {
            id,
            input_dim,
            feature_dim,
            trunk: specs,
            tail: tail_specs,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// L: number of trainable tail layers.
    pub fn tail_depth(&self) -> usize {
        self.tail.len()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(ScdemError::dimension(
                "backbone::forward",
                format!("[b×{}]", self.input_dim),
                format!("{shape:?}"),
            ));
        }
        Ok(())
    }

    /// Trunk output (pre-tail hidden state).
    fn trunk_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        for layer in &self.trunk {
            h = layer.apply(g, &self.params, h)?;
        }
        Ok(h)
    }

    /// Feature taps after each of the L tail layers; the last one is the
    /// backbone output. Forward is defined as this composition, so any
    /// prefix of taps is consistent with the full forward by construction.
    pub fn tail_taps_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = self.trunk_graph(g, x)?;
        let mut taps = Vec::with_capacity(self.tail.len());
        for layer in &self.tail {
            h = layer.apply(g, &self.params, h)?;
            taps.push(h);
        }
        Ok(taps)
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(*self.tail_taps_graph(g, x)?.last().expect("tail is nonempty"))
    }

    /// Plain forward: [b×d_x] → [b×d_z].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = self.forward_graph(&mut g, xv)?;
        Tensor::new(g.shape(out).to_vec(), g.values(out).to_vec())
    }

    /// Representation after the first `k` tail layers, 1-based k in [1, L].
    pub fn layer_features(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        if k == 0 || k > self.tail.len() {
            return Err(ScdemError::Index {
                op: "layer_features",
                index: k,
                bound: self.tail.len() + 1,
            });
        }
        let mut g = Graph::new();
        let xv = g.input(x);
        let taps = self.tail_taps_graph(&mut g, xv)?;
        let tap = taps[k - 1];
        Tensor::new(g.shape(tap).to_vec(), g.values(tap).to_vec())
    }

    /// Immutable deep copy of the current parameters.
    pub fn snapshot(&self) -> BackboneSnapshot {
        let mut copy = self.clone();
        copy.params.freeze_all();
        BackboneSnapshot { backbone: copy }
    }

    pub(crate) fn set_trunk_trainable(&mut self, trainable: bool) {
        for layer in &self.trunk {
            let w = self.params.entry_mut(layer.w);
            w.trainable = trainable;
            w.tensor.requires_grad = trainable;
            let b = self.params.entry_mut(layer.b);
            b.trainable = trainable;
            b.tensor.requires_grad = trainable;
        }
    }

    /// Bit hash over trunk parameters only (freeze contract probe).
    pub fn trunk_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for layer in &self.trunk {
            h ^= self.params.entry(layer.w).tensor.bit_hash();
            h = h.wrapping_mul(0x100000001b3);
            h ^= self.params.entry(layer.b).tensor.bit_hash();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Frozen deep copy of a backbone, taken at a task boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneSnapshot {
    backbone: Backbone,
}

impl BackboneSnapshot {
    pub fn source_id(&self) -> usize {
        self.backbone.id
    }

    pub fn params(&self) -> &ParamSet {
        &self.backbone.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.forward(x)
    }

    pub fn layer_features(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        self.backbone.layer_features(x, k)
    }

    pub fn tail_taps_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        self.backbone.tail_taps_graph(g, x)
    }

    pub fn bit_hash(&self) -> u64 {
        self.backbone.params.bit_hash()
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.backbone.params.rebuild_index();
        self.backbone.params.freeze_all();
    }
}

/// One snapshot per backbone; the caller replaces any previous set.
pub fn snapshot_all(backbones: &[Backbone]) -> Vec<BackboneSnapshot> {
    backbones.iter().map(Backbone::snapshot).collect()
}

/// Per-backbone features plus their concatenation in id order.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub per_backbone: Vec<Tensor>,
    pub combined: Tensor,
}

/// Runs every backbone on `x` and concatenates the outputs column-wise.
pub fn combined_features(backbones: &[Backbone], x: &Tensor) -> Result<FeatureBundle> {
    if backbones.is_empty() {
        return Err(ScdemError::Config("no backbones configured".into()));
    }
    let mut g = Graph::new();
    let xv = g.input(x);
    let mut vars = Vec::with_capacity(backbones.len());
    for bb in backbones {
        vars.push(bb.forward_graph(&mut g, xv)?);
    }
    let combined = g.concat(&vars)?;
    let per_backbone = vars
        .iter()
        .map(|&v| Tensor::new(g.shape(v).to_vec(), g.values(v).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureBundle {
        per_backbone,
        combined: Tensor::new(g.shape(combined).to_vec(), g.values(combined).to_vec())?,
    })
}

/// Pretraining settings for the stand-in backbones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPlan {
    pub epochs_cap: usize,
    pub batch_size: usize,
    pub target_accuracy: f64,
    pub optimizer: AdamConfig,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        PretrainPlan {
            epochs_cap: 60,
            batch_size: 32,
            target_accuracy: 0.95,
            optimizer: AdamConfig::default(),
        }
    }
}

/// Pretraining result; a missed accuracy target is a warning, not an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub backbone_id: usize,
    pub reached_target: bool,
    pub final_accuracy: f64,
    pub epochs_run: usize,
}

/// Trains a fresh backbone on its source task through a temporary linear
/// head, then freezes the trunk and discards the head.
pub fn pretrain_backbone(
    id: usize,
    cfg: &BackboneConfig,
    plan: &PretrainPlan,
    source: &SplitDataset,
    master_seed: u64,
) -> Result<(Backbone, PretrainOutcome)> {
    if source.train.is_empty() {
        return Err(ScdemError::Config("pretraining source is empty".into()));
    }
    let mut bb = Backbone::new(id, cfg, master_seed)?;
    bb.set_trunk_trainable(true);

    let n_classes = source.n_classes();
    let mut head = ParamSet::new();
    let mut init_rng = seed::rng(master_seed, salts::BACKBONE_INIT ^ (0x8000 + id as u64));
    head.insert(
        format!("bb{id}.head.w"),
        glorot_uniform(&mut init_rng, cfg.feature_dim, n_classes),
        true,
    )?;
    head.insert(format!("bb{id}.head.b"), Tensor::zeros(vec![n_classes]), true)?;

    let mut adam = AdamState::new(plan.optimizer);
    let mut shuffle_rng = seed::rng(master_seed, salts::PRETRAIN_SHUFFLE ^ id as u64);
    let mut epochs_run = 0;
    let mut accuracy = head_accuracy(&bb, &head, source)?;

    for _ in 0..plan.epochs_cap {
        let order = shuffled_indices(source.train.len(), &mut shuffle_rng);
        for chunk in order.chunks(plan.batch_size.max(1)) {
            let batch = source.train.select(chunk);
            let mut g = Graph::new();
            let xv = g.input(batch.inputs());
            let feat = bb.forward_graph(&mut g, xv)?;
            let w = g.param_by_name(&head, &format!("bb{id}.head.w"))?;
            let b = g.param_by_name(&head, &format!("bb{id}.head.b"))?;
            let logits = g.affine(feat, w, b)?;
            let probs = g.softmax(logits)?;
            let loss = g.cross_entropy(probs, batch.labels())?;
            g.backward(loss)?;
            g.write_grads(&mut bb.params);
            g.write_grads(&mut head);
            adam.step(&mut [&mut bb.params, &mut head])?;
        }
        epochs_run += 1;
        accuracy = head_accuracy(&bb, &head, source)?;
        if accuracy >= plan.target_accuracy {
            break;
        }
    }

    bb.set_trunk_trainable(false);
    bb.params.clear_grads();
    Ok((
        bb,
        PretrainOutcome {
            backbone_id: id,
            reached_target: accuracy >= plan.target_accuracy,
            final_accuracy: accuracy,
            epochs_run,
        },
    ))
}

fn head_accuracy(bb: &Backbone, head: &ParamSet, source: &SplitDataset) -> Result<f64> {
    let eval = if source.test.is_empty() {
        &source.train
    } else {
        &source.test
    };
    let mut g = Graph::new();
    let xv = g.input(eval.inputs());
    let feat = bb.forward_graph(&mut g, xv)?;
    let w = g.param(head, 0);
    let b = g.param(head, 1);
    let logits = g.affine(feat, w, b)?;
    let vals = g.values(logits);
    let cols = g.shape(logits)[1];
    let mut correct = 0usize;
    for (r, &y) in eval.labels().iter().enumerate() {
        let row = &vals[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}
