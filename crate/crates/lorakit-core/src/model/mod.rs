//! The toy autoregressive model: configuration, synthetic data,
//! transformer forward passes, and the training loops.

pub mod config;
pub mod data;
pub mod train;
pub mod transformer;

pub use config::ModelConfig;
pub use data::{Task, TaskDataset};
pub use train::{
    adapt, adapt_with, eval_loss, eval_token_accuracy, nll_loss, pretrain, pretrain_with,
    LrSchedule, TrainConfig, TrainReport,
};
pub use transformer::{
    build_training_graph, forward_batch, forward_batch_dynamic, forward_tokens, BatchLayout,
    OpStats, ParamKey, SeqExample, TrainingGraph, TransformerModel,
};
