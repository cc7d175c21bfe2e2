//! Adam, the learning-rate schedule and the alternating minimax loop.

mod adam;
mod config;
mod log;
mod minimax;

pub use adam::{adam_step, clip_grad_norm, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use config::{lr_at, Scheme, TrainConfig};
pub use log::{EpochRecord, Phase, StepRecord, TrainLog, TRAINLOG_HEADER};
pub use minimax::{
    minimax_round, run_training, run_training_observed, TrainOutcome, Trainer, TrainingData,
    MAX_NONFINITE_STREAK,
};
