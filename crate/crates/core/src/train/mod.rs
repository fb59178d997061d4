//! Optimizer, model assembly, the training loop and evaluation.

mod adamw;
mod model;
mod trainer;

pub use adamw::{AdamW, AdamWConfig};
pub use model::{sidecar_path, FlowLifter, ModelConfig, ModelMeta, ParameterCounts, Variant};
pub use trainer::{
    check_compatible, evaluate, loss_csv, train, train_with, EpochLoss, EvalConfig, Evaluation, TrainConfig,
    TrainOutput,
};
