//! Cycle-consistency GRPO fine-tuning of a tiny caption policy.
//!
//! A scene world renders into images, a windowed-history MLP captions them,
//! a frozen renderer turns captions back into images, and a frozen image
//! similarity scores the round trip. The policy is trained with group
//! relative policy optimization on that score.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod caption;
pub mod checkpoint;
pub mod config;
pub mod driver;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod policy;
pub mod render;
pub mod run;
pub mod seed;
pub mod similarity;
pub mod trainer;
pub mod warmstart;
pub mod world;

pub use caption::{Caption, SceneGraph, Vocab};
pub use checkpoint::Checkpoint;
pub use config::KeyValues;
pub use error::{Error, Result};
pub use eval::{CaptionScore, EvalReport};
pub use grpo::RatioMode;
pub use policy::{ImageEncoder, PolicyDims, PolicyParams};
pub use render::{Backend, RasterImage, RendererConfig};
pub use run::{Preset, RunConfig};
pub use similarity::{MetricKind, Similarity, SimilarityMetric};
pub use trainer::{StepMetrics, TrainConfig, TrainState, Trainer};
pub use world::{Scene, WorldConfig};
