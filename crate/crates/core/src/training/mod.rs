//! SkeletonBT and PSTL pretraining: view sampling, Adam with a warmup plus
//! cosine schedule, and per-step loss telemetry.

mod check;
mod optim;
mod pretrain;

pub use check::{
    grad_check_config, pretrain_grad_check, pretrain_grad_check_with, GRAD_CHECK_EPSILON, GRAD_CHECK_TOLERANCE,
};
pub use optim::{adam_step, lr_at, AdamConfig, AdamState};
pub use pretrain::{
    pretrain, pretrain_objective, pretrain_step, pretrain_step_pstl, pretrain_step_skeletonbt,
    sample_views, validate_pretrain, write_telemetry, PretrainConfig, PretrainMode, StepContext,
    StepLog, Stream, TrainConfig, TrainRun, Views,
};
