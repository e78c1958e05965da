//! Continual-learning engine built around dynamically expanding per-task
//! experts on top of a bank of partially trainable feature backbones.
//!
//! The moving parts, bottom up:
//!
//! - [`tensor`] / [`graph`] / [`optim`] — a dense f64 tensor store, a
//!   define-by-run reverse-mode tape, and an adaptive-moment optimizer.
//! - [`backbone`] — multi-source feature extractors with frozen trunks,
//!   trainable tail layers, per-layer feature taps, and immutable snapshots.
//! - [`expert`] — per-task adapter + classifier pairs over the concatenated
//!   backbone features.
//! - [`ot`] / [`regularizer`] — entropic optimal transport with an exact
//!   assignment oracle, prediction-distillation and feature-consistency
//!   losses, and learned layer attention.
//! - [`engine`] — the per-task training loop: create expert, optimize the
//!   combined objective, snapshot and freeze.
//! - [`routing`] — task-aware prediction and task-free expert selection.
//! - [`data`] / [`stream`] / [`metrics`] / [`checkpoint`] / [`config`] —
//!   the benchmark harness: datasets, task streams, accuracy/forgetting
//!   reports, persistence, and run configuration.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod expert;
pub mod graph;
pub mod kernel;
pub mod metrics;
pub mod optim;
pub mod ot;
pub mod params;
pub mod regularizer;
pub mod report;
pub mod routing;
pub mod seed;
pub mod stream;
pub mod tensor;

pub use backbone::{Backbone, BackboneConfig, BackboneSnapshot, FeatureBundle, PretrainOutcome};
pub use config::RunConfig;
pub use engine::{LossBreakdown, TrainConfig, TrainState};
pub use error::{Result, ScdemError};
pub use expert::Expert;
pub use graph::{Activation, Graph, Var};
pub use metrics::MetricsReport;
pub use optim::{AdamConfig, AdamState};
pub use ot::{exact_ot, sinkhorn_distance, OTConfig, SinkhornDiag};
pub use params::ParamSet;
pub use regularizer::Selector;
pub use routing::RoutingConfig;
pub use stream::TaskStream;
pub use tensor::Tensor;
