//! Selective prediction for short-answer grading: a classifier paired with
//! a learned deferral policy, trained jointly against a reward signal.

pub mod baselines;
pub mod cli;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod reward;
pub mod training;

pub use error::{Error, Result};
pub use evaluation::{compute_metrics, MetricsRecord, OutcomeCounts};
pub use model::{Checkpoint, ModelConfig, SelectiveModel};
pub use reward::RewardSignal;
pub use training::{LossWeights, TrainConfig};
