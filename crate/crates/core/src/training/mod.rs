//! Synthetic teacher tasks, AdamW, and the training/evaluation loop.

mod optim;
mod teacher;
mod trainer;

pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use teacher::{make_teacher_dataset, Dataset, Teacher, TeacherTaskSpec};
pub use trainer::{evaluate, train, RunMetrics, TrainConfig};
