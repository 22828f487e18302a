//! Teacher training, student self-supervised pretraining and distillation,
//! evaluation, checkpoints and the gradient-check harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod stages;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerConfig, Stage, TrainConfig};
pub use data::{ssl_pool, ClipStore};
pub use metrics::{loss_trend_ok, metrics_from_logits, predict, EpochRecord, Metrics};
pub use stages::{
    distill_student, distill_with_targets, encoder_from_checkpoint, evaluate, evaluate_student, evaluate_teacher, initial_student,
    new_teacher, pretrain_student_ssl, student_from_checkpoint, teacher_from_checkpoint, teacher_targets, train_linear_probe,
    train_teacher, ProbeOutcome, RunOptions, Trained,
};
