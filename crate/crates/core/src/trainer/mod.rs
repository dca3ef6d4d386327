//! Stage orchestration: pretraining, adaptation, finetuning, checkpoints.

pub mod checkpoint;
pub mod convert;
pub mod finetune;
pub mod stage;

pub use checkpoint::{load, save, Checkpoint, CheckpointMeta, StageSummary, FORMAT_VERSION};
pub use convert::{adapt_lm, adapt_nc_mlm, convert, ConvertMode};
pub use finetune::{multitask_finetune, FinetuneTask, PromptedPair, TaskMixture};
pub use stage::{
    build_pretrain_batch, run_stage, validation_loss, BudgetLedger, MetricsSink, StageKind,
    StepMetrics, TrainingStage, ValPoint, VecSink,
};
