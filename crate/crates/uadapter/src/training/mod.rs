//! Fine-tuning loop, evaluation metrics, and the sweep protocols built on
//! top of them.

pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod protocols;

pub use finetune::{
    evaluate_graphs, evaluate_model, finetune, trainable_count, EpochRecord, EvalOutput,
    Evaluation, FineTuneConfig, RunRecord,
};
pub use gradcheck::{model_gradcheck, GradCheckReport};
pub use metrics::{macro_roc_auc, per_task_roc_auc, roc_auc};
pub use protocols::{
    bottleneck_sweep, generalization_track, robustness_sweep, scaling_ablation, size_sweep,
    GapComparison, PerturbKind, ScalingAblation, SweepPoint, SweepResult, ROBUSTNESS_LEVELS,
    SCALING_GRID,
};
