//! AdaMixT: a mixture of transformer experts over multi-scale patches, fused
//! by an adaptive softmax gate, for channel-independent multivariate
//! forecasting.
//!
//! A window is instance-normalized, cut into patches at one scale per expert,
//! encoded by each expert, projected into a shared fusion space, combined
//! with the gate's weights and mapped to the horizon by a linear head.

// `as f64` on `Real` values is a no-op only in the default f64 build.
#![allow(clippy::unnecessary_cast)]

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod experts;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod preprocess;
pub mod training;

pub use config::ExperimentConfig;
pub use data::{RawDataset, SeriesWindow, SplitSpec, SynthSpec, WindowSet};
pub use error::{Error, Result};
pub use experts::{ExpertKind, ExpertProfile};
pub use fusion::{GateOverride, Gating};
pub use model::{AdaMixT, Batch, ModelConfig, Prediction};
pub use numerics::{Real, Tensor};
pub use preprocess::{NormStats, PatchSpec, ScaleFactor, ScaleGeometry};
pub use training::{Checkpoint, TrainConfig, TrainOutcome};
