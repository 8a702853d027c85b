//! Optimization: learning-rate schedule, clipping, Nesterov momentum,
//! gradient accumulation and checkpoints.

pub mod checkpoint;
pub mod fit;
pub mod optim;
pub mod schedule;
pub mod train_loop;

pub use checkpoint::{Checkpoint, DataState};
pub use fit::{fit, FitOptions, FitSummary, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG, VALID_LOG};
pub use optim::{clip_gradients, nesterov_step, OptimizerState};
pub use schedule::LrSchedule;
pub use train_loop::{DataIterator, StepStats, TrainConfig, Trainer};
