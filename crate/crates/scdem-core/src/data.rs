//! Dataset ingestion and synthesis.
//!
//! On-disk format is header-free CSV, one sample per row:
//! `label,v1,...,v_dx` with the label a non-negative integer.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdemError};
use crate::kernel;
use crate::seed::{self, salts};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A labelled sample matrix for one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    inputs: Tensor,
    labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(ScdemError::dimension(
                "dataset",
                "rank-2 inputs [n×d_x]",
                format!("{:?}", inputs.shape()),
            ));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(ScdemError::dimension(
                "dataset",
                format!("{} labels", inputs.shape()[0]),
                format!("{}", labels.len()),
            ));
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.inputs.row(i), self.labels[i])
    }

    /// Number of classes implied by the labels (max + 1).
    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Rows whose labels fall in `classes`, keeping order.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let d = self.input_dim();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if classes.contains(&self.labels[i]) {
                values.extend_from_slice(self.inputs.row(i));
                labels.push(self.labels[i]);
            }
        }
        let n = labels.len();
        Dataset {
            name: self.name.clone(),
            inputs: Tensor::new(vec![n.max(1), d], if n == 0 { vec![0.0; d] } else { values })
                .expect("filtered shape"),
            labels,
            split: self.split,
        }
    }

    /// Copy with every label shifted by `offset` (multi-domain union space).
    pub fn offset_labels(&self, offset: usize) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.clone(),
            labels: self.labels.iter().map(|&y| y + offset).collect(),
            split: self.split,
        }
    }

    /// Subset by row indices, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.input_dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            inputs: Tensor::new(vec![indices.len(), d], values).expect("selected shape"),
            labels,
            split: self.split,
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.len() {
            let (row, label) = self.sample(i);
            write!(out, "{label}").expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| ScdemError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Matching train/test splits of one source.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes().max(self.test.n_classes())
    }
}

/// Parses the header-free CSV dataset format. Each row must carry exactly
/// `1 + d_x` comma-separated fields. When `declared_classes` is given,
/// labels are validated against that range.
pub fn load_dataset(
    path: &Path,
    d_x: usize,
    split: Split,
    declared_classes: Option<usize>,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| ScdemError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d_x + 1 {
            return Err(ScdemError::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", d_x + 1, fields.len()),
            });
        }
        let label: usize = fields[0].trim().parse().map_err(|_| ScdemError::Parse {
            line: lineno,
            message: format!("label {:?} is not a non-negative integer", fields[0]),
        })?;
        if let Some(n) = declared_classes {
            if label >= n {
                return Err(ScdemError::Validation(format!(
                    "line {lineno}: label {label} outside declared range [0, {n})"
                )));
            }
        }
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.trim().parse().map_err(|_| ScdemError::Parse {
                line: lineno,
                message: format!("value {f:?} is not a number"),
            })?;
            values.push(v);
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(ScdemError::Validation(format!(
            "{} contains no samples",
            path.display()
        )));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::new(name, Tensor::new(vec![n, d_x], values)?, labels, split)
}

/// Synthesizes isotropic unit-variance Gaussian class blobs with pairwise
/// mean distance at least `separation`, split 80/20 into train/test per
/// class.
///
/// Consecutive classes (2k, 2k+1) are placed antipodally along mutually
/// orthogonal axes of a seeded random rotation, so every class pair is
/// linearly separable through the origin and distinct pairs occupy
/// orthogonal directions. Requires n_classes ≤ 2·d_x.
pub fn synth_gaussian_tasks(
    n_classes: usize,
    d_x: usize,
    per_class: usize,
    separation: f64,
    master_seed: u64,
) -> Result<SplitDataset> {
    if n_classes < 2 {
        return Err(ScdemError::Config(format!(
            "synthetic data needs at least 2 classes, got {n_classes}"
        )));
    }
    if per_class < 2 {
        return Err(ScdemError::Config("per_class must be at least 2".into()));
    }
    let n_axes = n_classes.div_ceil(2);
    if n_axes + 1 > d_x {
        return Err(ScdemError::Config(format!(
            "{n_classes} classes need {} independent axes but d_x is {d_x}",
            n_axes + 1
        )));
    }
    let mut rng = seed::rng(master_seed, salts::DATA);

    // Orthonormal frame from a seeded Gram-Schmidt pass over Gaussian
    // draws: one axis per class pair plus one shared direction.
    let n_frame = n_axes + 1;
    let mut axes = vec![0.0_f64; n_frame * d_x];
    for k in 0..n_frame {
        loop {
            for j in 0..d_x {
                axes[k * d_x + j] = StandardNormal.sample(&mut rng);
            }
            for prev in 0..k {
                let dot: f64 = (0..d_x)
                    .map(|j| axes[k * d_x + j] * axes[prev * d_x + j])
                    .sum();
                for j in 0..d_x {
                    axes[k * d_x + j] -= dot * axes[prev * d_x + j];
                }
            }
            let norm: f64 = (0..d_x)
                .map(|j| axes[k * d_x + j] * axes[k * d_x + j])
                .sum::<f64>()
                .sqrt();
            if norm > 1e-6 {
                for j in 0..d_x {
                    axes[k * d_x + j] /= norm;
                }
                break;
            }
        }
    }

    // Consecutive classes sit antipodally along their pair axis, tilted
    // toward one shared direction. The tilt correlates the tasks (they
    // compete for shared representation directions downstream) while the
    // untilted components stay mutually orthogonal.
    let shared = axes[n_axes * d_x..(n_axes + 1) * d_x].to_vec();
    let blend = AXIS_BLEND;
    let mut means = vec![0.0_f64; n_classes * d_x];
    for c in 0..n_classes {
        let axis = &axes[(c / 2) * d_x..(c / 2 + 1) * d_x];
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        for j in 0..d_x {
            let dir = (1.0 - blend * blend).sqrt() * axis[j] + blend * shared[j];
            means[c * d_x + j] = sign * dir;
        }
    }
    // Scale so that the minimum pairwise distance equals `separation`.
    let mut min_dist = f64::INFINITY;
    for a in 0..n_classes {
        for b in (a + 1)..n_classes {
            let d = kernel::sq_dist(&means[a * d_x..(a + 1) * d_x], &means[b * d_x..(b + 1) * d_x])
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let radius = separation / min_dist.max(1e-12);
    for m in means.iter_mut() {
        *m *= radius;
    }

    let train_per_class = (per_class * 4) / 5;
    let mut train_vals = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_vals = Vec::new();
    let mut test_labels = Vec::new();
    for c in 0..n_classes {
        let mean = &means[c * d_x..(c + 1) * d_x];
        for i in 0..per_class {
            let sample: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + noise
                })
                .collect();
            if i < train_per_class {
                train_vals.extend(sample);
                train_labels.push(c);
            } else {
                test_vals.extend(sample);
                test_labels.push(c);
            }
        }
    }
    let name = format!("gauss{n_classes}x{per_class}-d{d_x}");
    Ok(SplitDataset {
        train: Dataset::new(
            name.clone(),
            Tensor::new(vec![train_labels.len(), d_x], train_vals)?,
            train_labels,
            Split::Train,
        )?,
        test: Dataset::new(
            name,
            Tensor::new(vec![test_labels.len(), d_x], test_vals)?,
            test_labels,
            Split::Test,
        )?,
    })
}

/// Tilt of every class-pair axis toward the shared stream direction.
const AXIS_BLEND: f64 = 0.35;

/// Deterministic Fisher–Yates shuffle of 0..n.
pub fn shuffled_indices(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
