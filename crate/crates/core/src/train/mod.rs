//! Optimization loop, learning-rate schedule and checkpoint files.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainState};
pub use optim::{Sgd, SgdConfig};
pub use schedule::{lr_at, ScheduleConfig};
pub use trainer::{train, EpochMetrics, TrainConfig, TrainFusion, TrainOutcome};
