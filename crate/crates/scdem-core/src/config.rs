//! Run configuration: one JSON document describing the backbone bank, the
//! task stream, training hyperparameters and routing settings.
//!
//! ```json
//! {
//!   "backbones": {
//!     "count": 2,
//!     "arch": { "input_dim": 32, "trunk_widths": [192, 192],
//!               "tail_layers": 3, "feature_dim": 32, "activation": "relu",
//!               "tail_activations": ["relu", "relu", "tanh"] },
//!     "pretrain": { "epochs_cap": 60, "batch_size": 32,
//!                   "target_accuracy": 0.95,
//!                   "optimizer": { "lr": 1e-3, "beta1": 0.9,
//!                                  "beta2": 0.999, "epsilon": 1e-8 } },
//!     "source": { "n_classes": 16, "per_class": 80, "separation": 8.0 },
//!     "bank": null
//!   },
//!   "stream": { "kind": "synthetic_class_incremental", "n_classes": 10,
//!               "d_x": 32, "per_class": 60, "separation": 13.0, "n_steps": 5 },
//!   "train": { "lambda_cls": 1.0, "lambda_com": 1.0, "lambda_fused": 1.0,
//!              "lambda_fdc": 0.0, "epochs_per_task": 20, "batch_size": 32,
//!              "optimizer": { "lr": 1e-3, "beta1": 0.9, "beta2": 0.999,
//!                             "epsilon": 1e-8 },
//!              "adapter_dim": 64, "adapter_activation": "gelu",
//!              "regularizer_mode": "fused",
//!              "ot": { "epsilon": 0.05, "max_iters": 200, "tol": 1e-6 },
//!              "seed": 7 },
//!   "routing": { "gamma": 1.0, "temperature": 1.0 }
//! }
//! ```
//!
//! Every field has a default; an empty object `{}` is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_backbone, Backbone, BackboneConfig, PretrainOutcome, PretrainPlan};
use crate::data::{load_dataset, synth_gaussian_tasks, Split, SplitDataset};
use crate::engine::TrainConfig;
use crate::error::{Result, ScdemError};
use crate::routing::RoutingConfig;
use crate::seed::{derive, salts};
use crate::stream::{build_class_incremental_stream, build_multi_domain_stream, TaskStream};

/// Synthetic Gaussian-mixture source task for pretraining one backbone.
/// Each backbone draws its own source from a distinct seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub separation: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            n_classes: 16,
            per_class: 80,
            separation: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSetup {
    pub count: usize,
    pub arch: BackboneConfig,
    pub pretrain: PretrainPlan,
    pub source: SourceConfig,
    /// Optional path to a pretrained backbone bank; when set, `run` loads
    /// it instead of pretraining inline.
    pub bank: Option<PathBuf>,
}

impl Default for BackboneSetup {
    fn default() -> Self {
        BackboneSetup {
            count: 2,
            arch: BackboneConfig::default(),
            pretrain: PretrainPlan::default(),
            source: SourceConfig::default(),
            bank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSetup {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
    pub d_x: usize,
    pub n_classes: usize,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamSetup {
    SyntheticClassIncremental {
        n_classes: usize,
        d_x: usize,
        per_class: usize,
        separation: f64,
        n_steps: usize,
    },
    CsvClassIncremental {
        train: PathBuf,
        test: PathBuf,
        d_x: usize,
        n_classes: usize,
        n_steps: usize,
    },
    CsvMultiDomain {
        domains: Vec<DomainSetup>,
    },
}

impl Default for StreamSetup {
    fn default() -> Self {
        StreamSetup::SyntheticClassIncremental {
            n_classes: 10,
            d_x: 32,
            per_class: 60,
            separation: 13.0,
            n_steps: 5,
        }
    }
}

impl StreamSetup {
    pub fn input_dim(&self) -> usize {
        match self {
            StreamSetup::SyntheticClassIncremental { d_x, .. } => *d_x,
            StreamSetup::CsvClassIncremental { d_x, .. } => *d_x,
            StreamSetup::CsvMultiDomain { domains } => {
                domains.first().map_or(0, |d| d.d_x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbones: BackboneSetup,
    pub stream: StreamSetup,
    pub train: TrainConfig,
    pub routing: RoutingConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| ScdemError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ScdemError::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbones.count == 0 {
            return Err(ScdemError::Config("at least one backbone required".into()));
        }
        let d_x = self.stream.input_dim();
        if d_x != self.backbones.arch.input_dim {
            return Err(ScdemError::Config(format!(
                "stream input dim {d_x} does not match backbone input dim {}",
                self.backbones.arch.input_dim
            )));
        }
        if let StreamSetup::CsvMultiDomain { domains } = &self.stream {
            if domains.is_empty() {
                return Err(ScdemError::Config("multi-domain stream needs domains".into()));
            }
            if domains.iter().any(|d| d.d_x != d_x) {
                return Err(ScdemError::Config("all domains must share d_x".into()));
            }
        }
        self.backbones.arch.validate()?;
        self.train.validate()?;
        self.routing.validate()
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Materializes the task stream; synthetic data derives from the seed.
    pub fn build_stream(&self) -> Result<TaskStream> {
        match &self.stream {
            StreamSetup::SyntheticClassIncremental {
                n_classes,
                d_x,
                per_class,
                separation,
                n_steps,
            } => {
                let data =
                    synth_gaussian_tasks(*n_classes, *d_x, *per_class, *separation, self.seed())?;
                build_class_incremental_stream(&data, *n_steps)
            }
            StreamSetup::CsvClassIncremental {
                train,
                test,
                d_x,
                n_classes,
                n_steps,
            } => {
                let data = SplitDataset {
                    train: load_dataset(train, *d_x, Split::Train, Some(*n_classes))?,
                    test: load_dataset(test, *d_x, Split::Test, Some(*n_classes))?,
                };
                build_class_incremental_stream(&data, *n_steps)
            }
            StreamSetup::CsvMultiDomain { domains } => {
                let mut loaded = Vec::with_capacity(domains.len());
                let mut steps = Vec::with_capacity(domains.len());
                for d in domains {
                    loaded.push((
                        d.name.clone(),
                        SplitDataset {
                            train: load_dataset(&d.train, d.d_x, Split::Train, Some(d.n_classes))?,
                            test: load_dataset(&d.test, d.d_x, Split::Test, Some(d.n_classes))?,
                        },
                    ));
                    steps.push(d.n_steps);
                }
                build_multi_domain_stream(&loaded, &steps)
            }
        }
    }

    /// Pretrains the configured backbone bank, each on its own synthetic
    /// source distribution.
    pub fn pretrain_backbones(&self) -> Result<(Vec<Backbone>, Vec<PretrainOutcome>)> {
        let seed = self.seed();
        let mut backbones = Vec::with_capacity(self.backbones.count);
        let mut outcomes = Vec::with_capacity(self.backbones.count);
        for id in 0..self.backbones.count {
            let source = synth_gaussian_tasks(
                self.backbones.source.n_classes,
                self.backbones.arch.input_dim,
                self.backbones.source.per_class,
                self.backbones.source.separation,
                derive(seed, salts::BACKBONE_SOURCE ^ id as u64),
            )?;
            let (bb, outcome) = pretrain_backbone(
                id,
                &self.backbones.arch,
                &self.backbones.pretrain,
                &source,
                derive(seed, salts::BACKBONE_INIT ^ id as u64),
            )?;
            backbones.push(bb);
            outcomes.push(outcome);
        }
        Ok((backbones, outcomes))
    }
}
