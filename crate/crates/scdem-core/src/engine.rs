//! Per-task training orchestration: expert creation, the combined objective
//! over classification, distillation and feature-consistency terms, the
//! optimizer step, and the end-of-task snapshot/freeze discipline.

use serde::{Deserialize, Serialize};

use crate::backbone::{snapshot_all, Backbone, BackboneSnapshot};
use crate::data::shuffled_indices;
use crate::error::{Result, ScdemError};
use crate::expert::{validate_registration, Expert};
use crate::graph::{Activation, Graph, Var};
use crate::metrics::{evaluate_row, EvalMode, MetricsReport, TaskEval};
use crate::optim::{AdamConfig, AdamState};
use crate::ot::OTConfig;
use crate::regularizer::{
    com_loss_graph, fdc_loss_graph, fused_loss_graph, snap_taps_for, taps_for, OtHealth, Selector,
};
use crate::routing::RoutingConfig;
use crate::seed::{self, salts};
use crate::stream::{TaskSlice, TaskStream};
use crate::tensor::Tensor;

/// Which optimal-transport consistency term enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    /// Attention-fused transport term (the default objective).
    Fused,
    /// Unweighted per-layer transport term.
    Fdc,
    Both,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_cls: f64,
    pub lambda_com: f64,
    pub lambda_fused: f64,
    pub lambda_fdc: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// d_e: adapter output width.
    pub adapter_dim: usize,
    pub adapter_activation: Activation,
    pub regularizer_mode: RegularizerMode,
    pub ot: OTConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_cls: 1.0,
            lambda_com: 1.0,
            lambda_fused: 1.0,
            lambda_fdc: 0.0,
            epochs_per_task: 20,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            adapter_dim: 64,
            adapter_activation: Activation::Gelu,
            regularizer_mode: RegularizerMode::Fused,
            ot: OTConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_com", self.lambda_com),
            ("lambda_fused", self.lambda_fused),
            ("lambda_fdc", self.lambda_fdc),
        ] {
            if !(v >= 0.0) {
                return Err(ScdemError::Config(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(ScdemError::Config("batch_size must be ≥ 1".into()));
        }
        self.ot.validate()
    }

    /// The mode gates which transport terms are computed; a disabled term's
    /// weight is ignored.
    pub fn effective_fused_weight(&self) -> f64 {
        match self.regularizer_mode {
            RegularizerMode::Fused | RegularizerMode::Both => self.lambda_fused,
            _ => 0.0,
        }
    }

    pub fn effective_fdc_weight(&self) -> f64 {
        match self.regularizer_mode {
            RegularizerMode::Fdc | RegularizerMode::Both => self.lambda_fdc,
            _ => 0.0,
        }
    }
}

/// One diagnostics row per optimizer step: weighted loss contributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub step: usize,
    pub task: usize,
    pub l_cls: f64,
    pub l_com: f64,
    pub l_fused: f64,
    pub l_fdc: f64,
    pub total: f64,
}

/// Weighted loss components for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub com: f64,
    pub fused: f64,
    pub fdc: f64,
    pub total: f64,
}

/// Everything the continual learner carries between tasks.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub backbones: Vec<Backbone>,
    /// Most recent snapshot set; empty until the first task completes.
    pub snapshots: Vec<BackboneSnapshot>,
    /// Expert registry in task order; all but the in-training one frozen.
    pub experts: Vec<Expert>,
    /// Selectors for the task currently in training (task index > 1).
    pub selectors: Vec<Selector>,
    pub completed_tasks: usize,
    pub seed: u64,
    #[serde(skip)]
    pub optimizer: Option<AdamState>,
    #[serde(skip)]
    pub diagnostics: Vec<DiagRow>,
    #[serde(skip)]
    pub ot_health: OtHealth,
    #[serde(skip)]
    global_step: usize,
}

impl TrainState {
    pub fn new(backbones: Vec<Backbone>, seed: u64) -> Result<Self> {
        if backbones.is_empty() {
            return Err(ScdemError::Config("at least one backbone required".into()));
        }
        let dim = backbones[0].input_dim();
        let dz = backbones[0].feature_dim();
        let depth = backbones[0].tail_depth();
        for bb in &backbones {
            if bb.input_dim() != dim || bb.feature_dim() != dz || bb.tail_depth() != depth {
                return Err(ScdemError::Config(
                    "backbones must share input dim, feature dim and tail depth".into(),
                ));
            }
        }
        Ok(TrainState {
            backbones,
            snapshots: Vec::new(),
            experts: Vec::new(),
            selectors: Vec::new(),
            completed_tasks: 0,
            seed,
            optimizer: None,
            diagnostics: Vec::new(),
            ot_health: OtHealth::default(),
            global_step: 0,
        })
    }

    pub fn combined_dim(&self) -> usize {
        self.backbones.len() * self.backbones[0].feature_dim()
    }

    /// Registers a new expert, enforcing unique ids and disjoint classes.
    pub fn register_expert(&mut self, expert: Expert) -> Result<()> {
        validate_registration(&self.experts, &expert)?;
        self.experts.push(expert);
        Ok(())
    }

    pub fn current_expert(&self) -> Result<&Expert> {
        self.experts
            .last()
            .ok_or_else(|| ScdemError::Contract("no expert exists yet".into()))
    }

    /// Maps global labels into the given expert's local class indices.
    pub fn local_labels(expert: &Expert, global: &[usize]) -> Result<Vec<usize>> {
        global
            .iter()
            .map(|y| {
                expert
                    .class_set
                    .iter()
                    .position(|c| c == y)
                    .ok_or(ScdemError::Index {
                        op: "local_labels",
                        index: *y,
                        bound: expert.class_set.len(),
                    })
            })
            .collect()
    }
}

pub(crate) struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub com: Option<Var>,
    pub fused: Option<Var>,
    pub fdc: Option<Var>,
    pub health: OtHealth,
}

impl LossVars {
    fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            cls: g.scalar_value(self.cls),
            com: self.com.map_or(0.0, |v| g.scalar_value(v)),
            fused: self.fused.map_or(0.0, |v| g.scalar_value(v)),
            fdc: self.fdc.map_or(0.0, |v| g.scalar_value(v)),
            total: g.scalar_value(self.total),
        }
    }
}

/// Builds the full objective for one batch on a fresh graph. The transport
/// and distillation terms only exist past the first task.
pub(crate) fn build_total_loss(
    state: &TrainState,
    batch_x: &Tensor,
    batch_y_global: &[usize],
    cfg: &TrainConfig,
) -> Result<(Graph, LossVars)> {
    let expert = state.current_expert()?;
    let local = TrainState::local_labels(expert, batch_y_global)?;
    let task_index = state.experts.len();

    let mut g = Graph::new();
    let x = g.input(batch_x);
    let live_taps = taps_for(&mut g, &state.backbones, x)?;
    let live_outputs: Vec<Var> = live_taps
        .iter()
        .map(|taps| *taps.last().expect("nonempty tail"))
        .collect();
    let zf_live = g.concat(&live_outputs)?;

    let logits = expert.logits_graph(&mut g, zf_live)?;
    let probs = g.softmax(logits)?;
    let raw_cls = g.cross_entropy(probs, &local)?;
    let cls = g.scale(raw_cls, cfg.lambda_cls);
    let mut total = cls;

    let mut com = None;
    let mut fused = None;
    let mut fdc = None;
    let mut health = OtHealth::default();

    if task_index > 1 {
        if state.snapshots.len() != state.backbones.len() {
            return Err(ScdemError::Contract(
                "snapshots must exist for every backbone past the first task".into(),
            ));
        }
        let snap_taps = snap_taps_for(&mut g, &state.snapshots, x)?;
        let snap_outputs: Vec<Var> = snap_taps
            .iter()
            .map(|taps| *taps.last().expect("nonempty tail"))
            .collect();
        let zf_frozen = g.concat(&snap_outputs)?;

        let prior = &state.experts[..task_index - 1];
        let raw_com = com_loss_graph(&mut g, prior, zf_live, zf_frozen)?;
        let com_term = g.scale(raw_com, cfg.lambda_com);
        total = g.add(total, com_term)?;
        com = Some(com_term);

        let fused_w = cfg.effective_fused_weight();
        if matches!(cfg.regularizer_mode, RegularizerMode::Fused | RegularizerMode::Both) {
            let raw = fused_loss_graph(
                &mut g,
                &state.selectors,
                &live_taps,
                &snap_taps,
                &cfg.ot,
                &mut health,
            )?;
            let term = g.scale(raw, fused_w);
            total = g.add(total, term)?;
            fused = Some(term);
        }
        let fdc_w = cfg.effective_fdc_weight();
        if matches!(cfg.regularizer_mode, RegularizerMode::Fdc | RegularizerMode::Both) {
            let raw = fdc_loss_graph(&mut g, &live_taps, &snap_taps, &cfg.ot, &mut health)?;
            let term = g.scale(raw, fdc_w);
            total = g.add(total, term)?;
            fdc = Some(term);
        }
    }

    Ok((
        g,
        LossVars {
            total,
            cls,
            com,
            fused,
            fdc,
            health,
        },
    ))
}

/// Weighted loss components for one batch of the current task.
pub fn total_loss(state: &TrainState, batch_x: &Tensor, batch_y: &[usize], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let (g, vars) = build_total_loss(state, batch_x, batch_y, cfg)?;
    Ok(vars.breakdown(&g))
}

/// Trains one task from the stream. Only the current task's data is ever
/// seen; there is no replay buffer anywhere in the state.
pub fn train_task(state: &mut TrainState, task: &TaskSlice, cfg: &TrainConfig) -> Result<()> {
    train_task_observed(state, task, cfg, &mut |_| {})
}

/// [`train_task`] with a per-epoch observer, used by invariant probes.
pub fn train_task_observed(
    state: &mut TrainState,
    task: &TaskSlice,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&TrainState),
) -> Result<()> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(ScdemError::Config("task training set is empty".into()));
    }
    let t = state.completed_tasks + 1;
    let expert = Expert::new(
        t,
        state.combined_dim(),
        cfg.adapter_dim,
        cfg.adapter_activation,
        task.class_set.clone(),
        state.seed,
    )?;
    state.register_expert(expert)?;

    if t > 1 {
        let dz = state.backbones[0].feature_dim();
        state.selectors = state
            .backbones
            .iter()
            .map(|bb| Selector::new(bb.id, t, dz, state.seed))
            .collect::<Result<Vec<_>>>()?;
    }

    let mut adam = AdamState::new(cfg.optimizer);
    let mut shuffle_rng = seed::rng(state.seed, salts::EPOCH_SHUFFLE ^ t as u64);

    for _epoch in 0..cfg.epochs_per_task {
        let order = shuffled_indices(task.train.len(), &mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = task.train.select(chunk);
            let (mut g, vars) = build_total_loss(state, batch.inputs(), batch.labels(), cfg)?;
            let breakdown = vars.breakdown(&g);
            if !breakdown.total.is_finite() {
                return Err(ScdemError::Contract(format!(
                    "non-finite loss at task {t}: {breakdown:?}"
                )));
            }
            g.backward(vars.total)?;

            let expert = state.experts.last_mut().expect("registered above");
            g.write_grads(&mut expert.params);
            for bb in &mut state.backbones {
                g.write_grads(&mut bb.params);
            }
            for sel in &mut state.selectors {
                g.write_grads(&mut sel.params);
            }
            {
                let mut sets: Vec<&mut crate::params::ParamSet> = Vec::new();
                sets.push(&mut state.experts.last_mut().expect("current").params);
                for bb in &mut state.backbones {
                    sets.push(&mut bb.params);
                }
                for sel in &mut state.selectors {
                    sets.push(&mut sel.params);
                }
                adam.step(&mut sets)?;
            }

            state.global_step += 1;
            state.ot_health.calls += vars.health.calls;
            state.ot_health.nonconverged += vars.health.nonconverged;
            state.diagnostics.push(DiagRow {
                step: state.global_step,
                task: t,
                l_cls: breakdown.cls,
                l_com: breakdown.com,
                l_fused: breakdown.fused,
                l_fdc: breakdown.fdc,
                total: breakdown.total,
            });
        }
        on_epoch(state);
    }

    state.snapshots = snapshot_all(&state.backbones);
    state.experts.last_mut().expect("current").freeze();
    state.optimizer = Some(adam);
    state.completed_tasks = t;
    Ok(())
}

/// Full accuracy matrix gathered task by task, plus both evaluation modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub task_il: MetricsReport,
    pub class_il: MetricsReport,
}

/// Trains every task of the stream in order, evaluating after each task.
pub fn run_stream(
    state: &mut TrainState,
    stream: &TaskStream,
    cfg: &TrainConfig,
    routing: &RoutingConfig,
) -> Result<RunReport> {
    if stream.tasks.is_empty() {
        return Err(ScdemError::Config("task stream is empty".into()));
    }
    let mut rows_task_il: Vec<Vec<TaskEval>> = Vec::new();
    let mut rows_class_il: Vec<Vec<TaskEval>> = Vec::new();
    for task in &stream.tasks {
        train_task(state, task, cfg)?;
        let upto = state.completed_tasks;
        rows_task_il.push(evaluate_row(state, stream, EvalMode::TaskIl, upto, routing)?);
        rows_class_il.push(evaluate_row(state, stream, EvalMode::ClassIl, upto, routing)?);
    }
    Ok(RunReport {
        task_il: MetricsReport::assemble(EvalMode::TaskIl, rows_task_il),
        class_il: MetricsReport::assemble(EvalMode::ClassIl, rows_class_il),
    })
}

/// Renders the per-step diagnostics to the CSV wire format.
pub fn diagnostics_csv(rows: &[DiagRow]) -> String {
    let mut out = String::from("step,task,L_cls,L_COM,L_Fused,L_FDC,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.task, r.l_cls, r.l_com, r.l_fused, r.l_fdc, r.total
        ));
    }
    out
}
