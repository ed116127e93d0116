//! Parameters, AdamW, the warmup/decay schedule and the minibatch loop.

mod config;
mod optim;
mod param;
mod trainer;

pub use config::{default_config, lr_at, Method, TrainConfig, RECIPES};
pub use optim::{adamw_step, ADAM_EPS, BETA1, BETA2};
pub use param::Param;
pub use trainer::{
    batch_gradients, train, train_with, AdaptedLinear, Dropout, LogRow, Regression, Trainable, TrainLog,
};
