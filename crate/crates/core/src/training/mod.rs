//! Optimizer, schedule, L2 penalty, the training loop, checkpoint averaging
//! and the shared-gradient probe.

pub mod averaging;
pub mod optim;
pub mod probe;
pub mod trainer;

pub use averaging::{average, average_checkpoints};
pub use optim::{add_l2_grad, l2_penalized_loss, l2_penalty, lr_at, Adam, L2Scope};
pub use probe::{
    compare_gradients, grad_scale_probe, probe_shared_model, GradScaleReport, ParamGradStat,
};
pub use trainer::{
    eval_batches, evaluate, train, train_with_loss_hook, AveragedEval, Divergence, EvalRecord,
    RunRecord, StepRecord, TrainConfig,
};
