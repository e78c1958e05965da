//! Define-by-run reverse-mode differentiation on a flat tape.
//!
//! A [`Graph`] is rebuilt for every minibatch: leaves are bound from
//! [`ParamSet`]s or raw inputs, ops append nodes, and [`Graph::backward`]
//! walks the tape in reverse. Gradients are copied back into parameter
//! tensors with [`Graph::write_grads`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdemError};
use crate::kernel::{self, PROB_FLOOR};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise nonlinearity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => kernel::gelu(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => kernel::gelu_grad(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl FromStr for Activation {
    type Err = ScdemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(ScdemError::Config(format!("unknown activation kind {other}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Gelu => write!(f, "gelu"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Activation { x: Var, kind: Activation },
    Softmax { x: Var },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    KlDiv { p: Var, q: Var },
    Entropy { p: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    MeanAll { x: Var },
    Stack { parts: Vec<Var> },
    WeightedSum { coeffs: Var, layers: Vec<Var> },
    /// Transport cost ⟨plan, C(x,y)⟩ with the plan held fixed during backward.
    OtCost { x: Var, y: Var, plan: Vec<f64> },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// set_id → per-entry binding, so each parameter becomes one leaf per graph.
    bindings: HashMap<u64, Vec<Option<Var>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            values,
            shape,
            op,
            needs_grad,
            grad: None,
        });
        Var(id)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).values[0]
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Constant leaf from a tensor: gradients never flow into it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        self.push(values, shape, Op::Leaf, needs_grad)
    }

    /// Binds entry `idx` of a parameter set as a leaf, caching per set so a
    /// parameter used twice in one step still maps to a single node.
    pub fn param(&mut self, set: &ParamSet, idx: usize) -> Var {
        let id = set.set_id();
        if let Some(slot) = self.bindings.get(&id).and_then(|v| v.get(idx)).copied().flatten() {
            return slot;
        }
        let entry = set.entry(idx);
        let var = self.push(
            entry.tensor.values().to_vec(),
            entry.tensor.shape().to_vec(),
            Op::Leaf,
            entry.trainable,
        );
        let slots = self
            .bindings
            .entry(id)
            .or_insert_with(|| vec![None; set.len()]);
        if slots.len() < set.len() {
            slots.resize(set.len(), None);
        }
        slots[idx] = Some(var);
        var
    }

    pub fn param_by_name(&mut self, set: &ParamSet, name: &str) -> Result<Var> {
        let idx = set
            .position(name)
            .ok_or_else(|| ScdemError::Config(format!("unknown parameter {name}")))?;
        Ok(self.param(set, idx))
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// x[b×k] · w[k×n] + bias[n].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xn, wn, bn) = (self.node(x), self.node(w), self.node(b));
        if xn.shape.len() != 2 || wn.shape.len() != 2 || bn.shape.len() != 1 {
            return Err(ScdemError::dimension(
                "affine",
                "x[b×k], w[k×n], bias[n]",
                format!("{:?}, {:?}, {:?}", xn.shape, wn.shape, bn.shape),
            ));
        }
        let (bsz, k) = (xn.shape[0], xn.shape[1]);
        let (wk, n) = (wn.shape[0], wn.shape[1]);
        if k != wk || bn.shape[0] != n {
            return Err(ScdemError::dimension(
                "affine",
                format!("inner dim {k} and bias width {n}"),
                format!("w[{wk}×{n}], bias[{}]", bn.shape[0]),
            ));
        }
        let mut out = kernel::matmul(&xn.values, &wn.values, bsz, k, n);
        for r in 0..bsz {
            for j in 0..n {
                out[r * n + j] += bn.values[j];
            }
        }
        let needs = xn.needs_grad || wn.needs_grad || bn.needs_grad;
        Ok(self.push(out, vec![bsz, n], Op::Affine { x, w, b }, needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xn = self.node(x);
        let out: Vec<f64> = xn.values.iter().map(|&v| kind.apply(v)).collect();
        let shape = xn.shape.clone();
        let needs = xn.needs_grad;
        self.push(out, shape, Op::Activation { x, kind }, needs)
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xn = self.node(x);
        if xn.shape.is_empty() {
            return Err(ScdemError::dimension("softmax", "rank ≥ 1", "scalar"));
        }
        let (rows, cols) = (xn.rows(), xn.cols());
        let out = kernel::softmax_rows(&xn.values, rows, cols);
        let shape = xn.shape.clone();
        let needs = xn.needs_grad;
        Ok(self.push(out, shape, Op::Softmax { x }, needs))
    }

    /// Mean over the batch of −log(prob of the labelled class), floored.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pn = self.node(probs);
        let (rows, cols) = (pn.rows(), pn.cols());
        if labels.len() != rows {
            return Err(ScdemError::dimension(
                "cross_entropy",
                format!("{rows} labels"),
                format!("{}", labels.len()),
            ));
        }
        for &y in labels {
            if y >= cols {
                return Err(ScdemError::Index {
                    op: "cross_entropy",
                    index: y,
                    bound: cols,
                });
            }
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total -= pn.values[r * cols + y].max(PROB_FLOOR).ln();
        }
        let value = total / rows as f64;
        let needs = pn.needs_grad;
        Ok(self.push(
            vec![value],
            vec![],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// KL(p ‖ q) over the last axis, averaged over leading rows.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pn, qn) = (self.node(p), self.node(q));
        if pn.shape != qn.shape {
            return Err(ScdemError::dimension(
                "kl_divergence",
                format!("{:?}", pn.shape),
                format!("{:?}", qn.shape),
            ));
        }
        let (rows, cols) = (pn.rows(), pn.cols());
        let mut total = 0.0;
        for r in 0..rows {
            total += kernel::kl_row(
                &pn.values[r * cols..(r + 1) * cols],
                &qn.values[r * cols..(r + 1) * cols],
            );
        }
        let value = total / rows as f64;
        let needs = pn.needs_grad || qn.needs_grad;
        Ok(self.push(vec![value], vec![], Op::KlDiv { p, q }, needs))
    }

    /// Shannon entropy over the last axis, averaged over leading rows.
    pub fn entropy(&mut self, p: Var) -> Var {
        let pn = self.node(p);
        let (rows, cols) = (pn.rows(), pn.cols());
        let mut total = 0.0;
        for r in 0..rows {
            total += kernel::entropy_row(&pn.values[r * cols..(r + 1) * cols]);
        }
        let value = total / rows as f64;
        let needs = pn.needs_grad;
        self.push(vec![value], vec![], Op::Entropy { p }, needs)
    }

    /// Column-wise concatenation of rank-2 tensors sharing a batch size.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(ScdemError::Config("concat of an empty list".into()));
        }
        let bsz = self.node(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let n = self.node(p);
            if n.shape.len() != 2 || n.shape[0] != bsz {
                return Err(ScdemError::dimension(
                    "concat",
                    format!("rank-2 with batch {bsz}"),
                    format!("{:?}", n.shape),
                ));
            }
            widths.push(n.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; bsz * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let n = self.node(p);
            for r in 0..bsz {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&n.values[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(
            out,
            vec![bsz, total],
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (an, bn) = (self.node(a), self.node(b));
        if an.shape != bn.shape {
            return Err(ScdemError::dimension(
                "add",
                format!("{:?}", an.shape),
                format!("{:?}", bn.shape),
            ));
        }
        let out: Vec<f64> = an.values.iter().zip(&bn.values).map(|(x, y)| x + y).collect();
        let shape = an.shape.clone();
        let needs = an.needs_grad || bn.needs_grad;
        Ok(self.push(out, shape, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xn = self.node(x);
        let out: Vec<f64> = xn.values.iter().map(|v| v * factor).collect();
        let shape = xn.shape.clone();
        let needs = xn.needs_grad;
        self.push(out, shape, Op::Scale { x, factor }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xn = self.node(x);
        let value = xn.values.iter().sum();
        let needs = xn.needs_grad;
        self.push(vec![value], vec![], Op::Sum { x }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xn = self.node(x);
        let value = xn.values.iter().sum::<f64>() / xn.values.len() as f64;
        let needs = xn.needs_grad;
        self.push(vec![value], vec![], Op::MeanAll { x }, needs)
    }

    /// Stacks scalar nodes into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            let n = self.node(p);
            if n.values.len() != 1 {
                return Err(ScdemError::dimension(
                    "stack_scalars",
                    "scalar parts",
                    format!("{:?}", n.shape),
                ));
            }
            out.push(n.values[0]);
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(
            out,
            vec![parts.len()],
            Op::Stack {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Σ_k coeffs[k]·layers[k], rowwise. All layers share one shape.
    pub fn weighted_sum(&mut self, coeffs: Var, layers: &[Var]) -> Result<Var> {
        let cn = self.node(coeffs);
        if cn.shape.len() != 1 || cn.values.len() != layers.len() {
            return Err(ScdemError::dimension(
                "weighted_sum",
                format!("{} coefficients", layers.len()),
                format!("{:?}", cn.shape),
            ));
        }
        if layers.is_empty() {
            return Err(ScdemError::Config("weighted_sum of an empty list".into()));
        }
        let shape = self.node(layers[0]).shape.clone();
        for &l in layers {
            if self.node(l).shape != shape {
                return Err(ScdemError::dimension(
                    "weighted_sum",
                    format!("{shape:?}"),
                    format!("{:?}", self.node(l).shape),
                ));
            }
        }
        let n = self.node(layers[0]).values.len();
        let mut out = vec![0.0; n];
        for (k, &l) in layers.iter().enumerate() {
            let alpha = self.node(coeffs).values[k];
            let lv = &self.node(l).values;
            for i in 0..n {
                out[i] += alpha * lv[i];
            }
        }
        let needs =
            self.node(coeffs).needs_grad || layers.iter().any(|&l| self.node(l).needs_grad);
        Ok(self.push(
            out,
            shape,
            Op::WeightedSum {
                coeffs,
                layers: layers.to_vec(),
            },
            needs,
        ))
    }

    /// Installs a transport-cost node: value ⟨plan, C(x,y)⟩ with squared
    /// Euclidean cost; the plan enters as data, not as a differentiated input.
    pub(crate) fn ot_cost(&mut self, x: Var, y: Var, plan: Vec<f64>, value: f64) -> Var {
        let needs = self.node(x).needs_grad || self.node(y).needs_grad;
        self.push(vec![value], vec![], Op::OtCost { x, y, plan }, needs)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients of every
    /// grad-tracking node reachable from `loss` are populated; unreachable
    /// leaves read back as zero through [`Graph::write_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).values.len() != 1 {
            return Err(ScdemError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let grad = node.grad.as_ref().expect("grad present");
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (bsz, n_out) = (node.rows(), node.cols());
                    let k = head[x.0].shape[1];
                    if head[x.0].needs_grad {
                        // dx = g · wᵀ
                        let wv = head[w.0].values.clone();
                        let gx = accum(&mut head[x.0]);
                        for r in 0..bsz {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n_out {
                                    s += grad[r * n_out + j] * wv[p * n_out + j];
                                }
                                gx[r * k + p] += s;
                            }
                        }
                    }
                    if head[w.0].needs_grad {
                        // dw = xᵀ · g
                        let xv = head[x.0].values.clone();
                        let gw = accum(&mut head[w.0]);
                        for p in 0..k {
                            for j in 0..n_out {
                                let mut s = 0.0;
                                for r in 0..bsz {
                                    s += xv[r * k + p] * grad[r * n_out + j];
                                }
                                gw[p * n_out + j] += s;
                            }
                        }
                    }
                    if head[b.0].needs_grad {
                        let gb = accum(&mut head[b.0]);
                        for r in 0..bsz {
                            for j in 0..n_out {
                                gb[j] += grad[r * n_out + j];
                            }
                        }
                    }
                }
                Op::Activation { x, kind } => {
                    if head[x.0].needs_grad {
                        let kind = *kind;
                        let xv = head[x.0].values.clone();
                        let gx = accum(&mut head[x.0]);
                        for (i, (&g, &xi)) in grad.iter().zip(&xv).enumerate() {
                            gx[i] += g * kind.grad(xi);
                        }
                    }
                }
                Op::Softmax { x } => {
                    if head[x.0].needs_grad {
                        let (rows, cols) = (node.rows(), node.cols());
                        let s = &node.values;
                        let gx = accum(&mut head[x.0]);
                        for r in 0..rows {
                            let dot: f64 = (0..cols)
                                .map(|j| grad[r * cols + j] * s[r * cols + j])
                                .sum();
                            for j in 0..cols {
                                gx[r * cols + j] +=
                                    s[r * cols + j] * (grad[r * cols + j] - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy { probs, labels } => {
                    if head[probs.0].needs_grad {
                        let g = grad[0];
                        let cols = head[probs.0].shape[1];
                        let bsz = labels.len() as f64;
                        let pv = head[probs.0].values.clone();
                        let gp = accum(&mut head[probs.0]);
                        for (r, &y) in labels.iter().enumerate() {
                            let p = pv[r * cols + y];
                            if p > PROB_FLOOR {
                                gp[r * cols + y] -= g / (bsz * p);
                            }
                        }
                    }
                }
                Op::KlDiv { p, q } => {
                    let g = grad[0];
                    let rows = head[p.0].rows();
                    let scale = g / rows as f64;
                    let pv = head[p.0].values.clone();
                    let qv = head[q.0].values.clone();
                    if head[p.0].needs_grad {
                        let gp = accum(&mut head[p.0]);
                        for i in 0..pv.len() {
                            let log_ratio = pv[i].max(PROB_FLOOR).ln() - qv[i].max(PROB_FLOOR).ln();
                            let inner = if pv[i] > PROB_FLOOR { 1.0 } else { 0.0 };
                            gp[i] += scale * (log_ratio + inner);
                        }
                    }
                    if head[q.0].needs_grad {
                        let gq = accum(&mut head[q.0]);
                        for i in 0..qv.len() {
                            if qv[i] > PROB_FLOOR {
                                gq[i] -= scale * pv[i] / qv[i];
                            }
                        }
                    }
                }
                Op::Entropy { p } => {
                    if head[p.0].needs_grad {
                        let g = grad[0];
                        let rows = head[p.0].rows();
                        let scale = g / rows as f64;
                        let pv = head[p.0].values.clone();
                        let gp = accum(&mut head[p.0]);
                        for i in 0..pv.len() {
                            let inner = if pv[i] > PROB_FLOOR { 1.0 } else { 0.0 };
                            gp[i] -= scale * (pv[i].max(PROB_FLOOR).ln() + inner);
                        }
                    }
                }
                Op::Concat { parts } => {
                    let bsz = node.rows();
                    let total = node.cols();
                    let mut offset = 0;
                    for &part in parts {
                        let w = head[part.0].shape[1];
                        if head[part.0].needs_grad {
                            let gp = accum(&mut head[part.0]);
                            for r in 0..bsz {
                                for j in 0..w {
                                    gp[r * w + j] += grad[r * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::Add { a, b } => {
                    for &side in &[*a, *b] {
                        if head[side.0].needs_grad {
                            let gs = accum(&mut head[side.0]);
                            for (gi, &g) in gs.iter_mut().zip(grad.iter()) {
                                *gi += g;
                            }
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if head[x.0].needs_grad {
                        let f = *factor;
                        let gx = accum(&mut head[x.0]);
                        for (gi, &g) in gx.iter_mut().zip(grad.iter()) {
                            *gi += f * g;
                        }
                    }
                }
                Op::Sum { x } => {
                    if head[x.0].needs_grad {
                        let g = grad[0];
                        let gx = accum(&mut head[x.0]);
                        for gi in gx.iter_mut() {
                            *gi += g;
                        }
                    }
                }
                Op::MeanAll { x } => {
                    if head[x.0].needs_grad {
                        let n = head[x.0].values.len() as f64;
                        let g = grad[0] / n;
                        let gx = accum(&mut head[x.0]);
                        for gi in gx.iter_mut() {
                            *gi += g;
                        }
                    }
                }
                Op::Stack { parts } => {
                    for (k, &part) in parts.iter().enumerate() {
                        if head[part.0].needs_grad {
                            accum(&mut head[part.0])[0] += grad[k];
                        }
                    }
                }
                Op::WeightedSum { coeffs, layers } => {
                    let g = grad;
                    if head[coeffs.0].needs_grad {
                        let mut deltas = vec![0.0; layers.len()];
                        for (k, &l) in layers.iter().enumerate() {
                            let lv = &head[l.0].values;
                            deltas[k] = lv.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
                        }
                        let gc = accum(&mut head[coeffs.0]);
                        for (gi, d) in gc.iter_mut().zip(deltas) {
                            *gi += d;
                        }
                    }
                    let alphas = head[coeffs.0].values.clone();
                    for (k, &l) in layers.iter().enumerate() {
                        if head[l.0].needs_grad {
                            let gl = accum(&mut head[l.0]);
                            for (gi, &gv) in gl.iter_mut().zip(g.iter()) {
                                *gi += alphas[k] * gv;
                            }
                        }
                    }
                }
                Op::OtCost { x, y, plan } => {
                    let g = grad[0];
                    let bx = head[x.0].shape[0];
                    let by = head[y.0].shape[0];
                    let d = head[x.0].shape[1];
                    let xv = head[x.0].values.clone();
                    let yv = head[y.0].values.clone();
                    if head[x.0].needs_grad {
                        let gx = accum(&mut head[x.0]);
                        for i in 0..bx {
                            for j in 0..by {
                                let p = plan[i * by + j];
                                if p == 0.0 {
                                    continue;
                                }
                                for c in 0..d {
                                    gx[i * d + c] +=
                                        g * p * 2.0 * (xv[i * d + c] - yv[j * d + c]);
                                }
                            }
                        }
                    }
                    if head[y.0].needs_grad {
                        let gy = accum(&mut head[y.0]);
                        for i in 0..bx {
                            for j in 0..by {
                                let p = plan[i * by + j];
                                if p == 0.0 {
                                    continue;
                                }
                                for c in 0..d {
                                    gy[j * d + c] +=
                                        g * p * 2.0 * (yv[j * d + c] - xv[i * d + c]);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Copies gradients of this graph's bound leaves into the parameter
    /// tensors. Trainable entries that were never reached read back as zero.
    pub fn write_grads(&self, set: &mut ParamSet) {
        let slots = self.bindings.get(&set.set_id());
        for idx in 0..set.len() {
            let entry = set.entry_mut(idx);
            if !entry.trainable {
                continue;
            }
            let bound = slots.and_then(|s| s.get(idx)).copied().flatten();
            let grad = bound
                .and_then(|v| self.grad(v))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; entry.tensor.len()]);
            entry.tensor.grad = Some(grad);
        }
    }
}

fn accum(node: &mut Node) -> &mut Vec<f64> {
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.values.len()]);
    }
    node.grad.as_mut().expect("just initialized")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph() -> Graph {
        Graph::new()
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![1.0, 2.0], vec![1, 2], false);
        let w = g.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let b = g.leaf(vec![0.0, 0.0], vec![2], false);
        let out = g.affine(x, w, b).unwrap();
        assert_eq!(g.values(out), &[1.0, 2.0]);
    }

    #[test]
    fn affine_hand_multiplied() {
        // [1,1]·[[2,3],[4,5]] + [1,1] = [2+4+1, 3+5+1]
        let mut g = scalar_graph();
        let x = g.leaf(vec![1.0, 1.0], vec![1, 2], false);
        let w = g.leaf(vec![2.0, 3.0, 4.0, 5.0], vec![2, 2], false);
        let b = g.leaf(vec![1.0, 1.0], vec![2], false);
        let out = g.affine(x, w, b).unwrap();
        assert_eq!(g.values(out), &[7.0, 9.0]);
    }

    #[test]
    fn affine_zero_input_passes_bias() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![0.0, 0.0], vec![1, 2], false);
        let w = g.leaf(vec![3.0, -1.0, 2.0, 8.0], vec![2, 2], false);
        let b = g.leaf(vec![5.0, 5.0], vec![2], false);
        let out = g.affine(x, w, b).unwrap();
        assert_eq!(g.values(out), &[5.0, 5.0]);
    }

    #[test]
    fn affine_shape_mismatch_errors() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![0.0; 3], vec![1, 3], false);
        let w = g.leaf(vec![0.0; 4], vec![2, 2], false);
        let b = g.leaf(vec![0.0; 2], vec![2], false);
        assert!(matches!(g.affine(x, w, b), Err(ScdemError::Dimension { .. })));
    }

    #[test]
    fn activation_values() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![-1.0, 0.0, 2.0], vec![3], false);
        let r = g.activation(x, Activation::Relu);
        assert_eq!(g.values(r), &[0.0, 0.0, 2.0]);

        let z = g.leaf(vec![0.0], vec![1], false);
        let t = g.activation(z, Activation::Tanh);
        assert_eq!(g.values(t), &[0.0]);

        let one = g.leaf(vec![1.0], vec![1], false);
        let ge = g.activation(one, Activation::Gelu);
        assert!((g.values(ge)[0] - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![0.0, 0.0], vec![2], false);
        let s = g.softmax(x).unwrap();
        assert!((g.values(s)[0] - 0.5).abs() < 1e-15);

        let y = g.leaf(vec![1.0, 0.0], vec![2], false);
        let s2 = g.softmax(y).unwrap();
        assert!((g.values(s2)[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((g.values(s2)[1] - 0.2689414213699951).abs() < 1e-12);

        let c = g.leaf(vec![5.0, 5.0, 5.0], vec![3], false);
        let s3 = g.softmax(c).unwrap();
        for v in g.values(s3) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![3.0, -2.0, 0.5, 100.0, 99.0, 98.0], vec![2, 3], false);
        let s = g.softmax(x).unwrap();
        for r in 0..2 {
            let sum: f64 = g.values(s)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = scalar_graph();
        // One-hot correct row: loss only from the floor, ≤ 2.8e-11.
        let p = g.leaf(vec![1.0, 0.0], vec![1, 2], false);
        let ce = g.cross_entropy(p, &[0]).unwrap();
        assert!(g.scalar_value(ce).abs() <= 2.8e-11);

        let p2 = g.leaf(vec![0.7, 0.3], vec![1, 2], false);
        let ce2 = g.cross_entropy(p2, &[0]).unwrap();
        assert!((g.scalar_value(ce2) - 0.35667494393873245).abs() < 1e-12);

        let p3 = g.leaf(vec![0.25; 4], vec![1, 4], false);
        let ce3 = g.cross_entropy(p3, &[2]).unwrap();
        assert!((g.scalar_value(ce3) - (4.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = scalar_graph();
        let p = g.leaf(vec![0.5, 0.5], vec![1, 2], false);
        assert!(matches!(
            g.cross_entropy(p, &[2]),
            Err(ScdemError::Index { .. })
        ));
    }

    #[test]
    fn kl_divergence_examples() {
        let mut g = scalar_graph();
        let p = g.leaf(vec![0.4, 0.6], vec![2], false);
        let q = g.leaf(vec![0.4, 0.6], vec![2], false);
        let kl = g.kl_divergence(p, q).unwrap();
        assert!(g.scalar_value(kl).abs() < 1e-15);

        let p2 = g.leaf(vec![0.7, 0.3], vec![2], false);
        let q2 = g.leaf(vec![0.5, 0.5], vec![2], false);
        let kl2 = g.kl_divergence(p2, q2).unwrap();
        assert!((g.scalar_value(kl2) - 0.08228287850505178).abs() < 1e-10);

        let p3 = g.leaf(vec![1.0, 0.0], vec![2], false);
        let q3 = g.leaf(vec![0.5, 0.5], vec![2], false);
        let kl3 = g.kl_divergence(p3, q3).unwrap();
        assert!((g.scalar_value(kl3) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_length_mismatch_errors() {
        let mut g = scalar_graph();
        let p = g.leaf(vec![0.5, 0.5], vec![2], false);
        let q = g.leaf(vec![0.4, 0.3, 0.3], vec![3], false);
        assert!(matches!(
            g.kl_divergence(p, q),
            Err(ScdemError::Dimension { .. })
        ));
    }

    #[test]
    fn entropy_examples() {
        let mut g = scalar_graph();
        let onehot = g.leaf(vec![1.0, 0.0, 0.0], vec![3], false);
        let h = g.entropy(onehot);
        assert!(g.scalar_value(h).abs() < 1e-15);

        let u = g.leaf(vec![0.25; 4], vec![4], false);
        let h2 = g.entropy(u);
        assert!((g.scalar_value(h2) - (4.0_f64).ln()).abs() < 1e-12);

        let p = g.leaf(vec![0.7, 0.3], vec![2], false);
        let h3 = g.entropy(p);
        assert!((g.scalar_value(h3) - 0.6108643020548935).abs() < 1e-10);
    }

    #[test]
    fn concat_examples() {
        let mut g = scalar_graph();
        let a = g.leaf(vec![1.0, 2.0, 5.0, 6.0], vec![2, 2], false);
        let b = g.leaf(vec![3.0, 7.0], vec![2, 1], false);
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.values(c), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);

        let single = g.concat(&[a]).unwrap();
        assert_eq!(g.values(single), g.values(a));

        let bad = g.leaf(vec![0.0; 3], vec![3, 1], false);
        assert!(matches!(g.concat(&[a, bad]), Err(ScdemError::Dimension { .. })));
        assert!(matches!(g.concat(&[]), Err(ScdemError::Config(_))));
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![1.0, 2.0, 3.0], vec![3], true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_softmax_cross_entropy_composite() {
        // d/dlogits of CE(softmax(l), y) = softmax(l) − onehot(y).
        let mut g = scalar_graph();
        let logits = g.leaf(vec![1.0, 0.0], vec![1, 2], true);
        let probs = g.softmax(logits).unwrap();
        let loss = g.cross_entropy(probs, &[0]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!((grad[0] - (-0.2689414213699951)).abs() < 1e-10);
        assert!((grad[1] - 0.2689414213699951).abs() < 1e-10);
    }

    #[test]
    fn backward_constant_loss_zeroes_grads() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![1.0, 2.0], vec![2], true);
        let c = g.leaf(vec![4.0], vec![], false);
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());

        let mut set = ParamSet::new();
        set.insert("x", crate::tensor::Tensor::vector(vec![1.0, 2.0]), true)
            .unwrap();
        let mut g2 = scalar_graph();
        let _bound = g2.param(&set, 0);
        let c2 = g2.leaf(vec![4.0], vec![], false);
        let loss2 = g2.sum(c2);
        g2.backward(loss2).unwrap();
        g2.write_grads(&mut set);
        assert_eq!(set.entry(0).tensor.grad.as_deref().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![1.0, 2.0], vec![2], true);
        assert!(matches!(g.backward(x), Err(ScdemError::Contract(_))));
    }

    #[test]
    fn softmax_argmax_shift_invariant() {
        let mut g = scalar_graph();
        let x = g.leaf(vec![0.3, -1.0, 2.2], vec![3], false);
        let shifted = g.leaf(vec![100.3, 99.0, 102.2], vec![3], false);
        let s1 = g.softmax(x).unwrap();
        let s2 = g.softmax(shifted).unwrap();
        let am = |vals: &[f64]| {
            vals.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(am(g.values(s1)), am(g.values(s2)));
        for (a, b) in g.values(s1).iter().zip(g.values(s2)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn param_binding_is_cached() {
        let mut set = ParamSet::new();
        set.insert("w", crate::tensor::Tensor::vector(vec![1.0]), true)
            .unwrap();
        let mut g = scalar_graph();
        let a = g.param(&set, 0);
        let b = g.param(&set, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_sum_and_stack() {
        let mut g = scalar_graph();
        let l1 = g.leaf(vec![4.0, 4.0], vec![1, 2], true);
        let l2 = g.leaf(vec![0.0, 0.0], vec![1, 2], true);
        let coeffs = g.leaf(vec![0.75, 0.25], vec![2], true);
        let fused = g.weighted_sum(coeffs, &[l1, l2]).unwrap();
        assert_eq!(g.values(fused), &[3.0, 3.0]);

        let loss = g.sum(fused);
        g.backward(loss).unwrap();
        // d/dα_k = Σ z_k; d/dz_k = α_k.
        assert_eq!(g.grad(coeffs).unwrap(), &[8.0, 0.0]);
        assert_eq!(g.grad(l1).unwrap(), &[0.75, 0.75]);
        assert_eq!(g.grad(l2).unwrap(), &[0.25, 0.25]);
    }
}
